"""Dataset ingestion: CIFAR-10 binary batches, class folders and a synthetic set."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger(__name__)

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
_RECORD = 1 + 32 * 32 * 3


class IngestionError(RuntimeError):
    """A dataset file is missing, unreadable or malformed."""


@dataclass
class ImageSet:
    """Normalised images ``N x C x H x W`` with integer labels."""

    images: torch.Tensor
    labels: torch.Tensor
    mean: tuple
    std: tuple
    classes: tuple = ()
    indices: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels differ in length")
        if not torch.isfinite(self.images).all():
            raise ValueError("non-finite pixel values")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.classes) if self.classes else int(self.labels.max()) + 1

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        t = torch.from_numpy(idx)
        base = self.indices[idx] if self.indices is not None else idx
        return ImageSet(self.images[t], self.labels[t], self.mean, self.std, self.classes, base)

    def _stats(self, like: torch.Tensor):
        shape = (-1, 1, 1)
        mean = torch.tensor(self.mean, dtype=like.dtype).reshape(shape)
        std = torch.tensor(self.std, dtype=like.dtype).reshape(shape)
        return mean, std

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        mean, std = self._stats(x)
        return x * std + mean

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        mean, std = self._stats(x)
        return (x - mean) / std

    def clamp_valid(self, x: torch.Tensor) -> torch.Tensor:
        """Clamp normalised images to the range of a displayable [0, 1] image."""
        mean, std = self._stats(x)
        return torch.maximum(torch.minimum(x, (1 - mean) / std), -mean / std)

    def to_display(self, x: torch.Tensor) -> torch.Tensor:
        return self.denormalize(x).clamp(0.0, 1.0)

    def value_range(self) -> tuple[float, float]:
        """Min and max normalised pixel value over the dataset."""
        return float(self.images.min()), float(self.images.max())

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.numpy().astype("<f4").tobytes())
        h.update(self.labels.numpy().astype("<i8").tobytes())
        return h.hexdigest()


def _to_set(raw_uint8: np.ndarray, labels: np.ndarray, mean, std, classes, indices=None) -> ImageSet:
    x = torch.from_numpy(raw_uint8.astype(np.float32) / 255.0)
    m = torch.tensor(mean, dtype=torch.float32).reshape(1, -1, 1, 1)
    s = torch.tensor(std, dtype=torch.float32).reshape(1, -1, 1, 1)
    return ImageSet((x - m) / s, torch.from_numpy(labels.astype(np.int64)),
                    tuple(mean), tuple(std), tuple(classes), indices)


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise IngestionError(f"missing CIFAR-10 batch file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % _RECORD:
        raise IngestionError(f"corrupt CIFAR-10 batch file (size {raw.size}): {path}")
    raw = raw.reshape(-1, _RECORD)
    labels = raw[:, 0]
    if labels.max() > 9:
        raise IngestionError(f"label byte out of range in {path}")
    return raw[:, 1:].reshape(-1, 3, 32, 32), labels


def _cifar_dir(root: Path) -> Path:
    for cand in (root, root / "cifar-10-batches-bin"):
        if (cand / "data_batch_1.bin").exists():
            return cand
    return root


def read_cifar10_raw(root) -> dict:
    """Decode the raw uint8 CIFAR-10 binary batches without normalisation."""
    d = _cifar_dir(Path(root))
    parts = [_read_cifar_file(d / f"data_batch_{k}.bin") for k in range(1, 6)]
    test = _read_cifar_file(d / "test_batch.bin")
    return {
        "train": (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])),
        "test": test,
    }


def load_cifar10(root, subset: int | None = 10000, test_subset: int | None = 2000, seed: int = 0,
                 mean=CIFAR10_MEAN, std=CIFAR10_STD) -> tuple[ImageSet, ImageSet]:
    """Return ``(train, test)`` with deterministic seeded subsets."""
    raw = read_cifar10_raw(root)
    rng = np.random.default_rng(seed)
    out = []
    for split, size in (("train", subset), ("test", test_subset)):
        x, y = raw[split]
        idx = np.arange(len(y))
        if size is not None and size < len(y):
            idx = np.sort(rng.choice(len(y), size=size, replace=False))
        out.append(_to_set(x[idx], y[idx], mean, std, CIFAR10_CLASSES, idx))
    return out[0], out[1]


_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".pgm", ".tif", ".tiff", ".webp"}


def load_image_folder(root, class_map=None, resize: int = 32, seed: int = 0,
                      mean=CIFAR10_MEAN, std=CIFAR10_STD, test_fraction: float = 0.0):
    """Load a directory-per-class image tree.

    ``class_map`` optionally restricts/orders the classes; otherwise classes are
    the sorted subdirectory names. Unreadable files are skipped with a warning.
    Returns one ImageSet, or ``(train, test)`` when ``test_fraction > 0``.
    """
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"image folder not found: {root}")
    classes = list(class_map) if class_map else sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for label, name in enumerate(classes):
        files = sorted(f for f in (root / name).glob("*") if f.suffix.lower() in _IMAGE_SUFFIXES)
        loaded = 0
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((resize, resize), Image.BILINEAR)
                    images.append(np.asarray(im, dtype=np.uint8).transpose(2, 0, 1))
            except (OSError, ValueError) as exc:
                log.warning("skipping unreadable image %s: %s", f, exc)
                continue
            labels.append(label)
            loaded += 1
        if loaded == 0:
            raise IngestionError(f"class directory has no readable images: {root / name}")
    data = _to_set(np.stack(images), np.asarray(labels), mean, std, classes)
    if test_fraction <= 0:
        return data
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(data))
    cut = int(round(len(data) * (1 - test_fraction)))
    return data.subset(np.sort(perm[:cut])), data.subset(np.sort(perm[cut:]))


def make_synthetic(n_train: int = 2000, n_test: int = 500, image_size: int = 32,
                   num_classes: int = 10, seed: int = 0, noise: float = 0.03):
    """Class-conditional oriented gratings with random phase, colour jitter and noise.

    Cheap stand-in for CIFAR-10 when the real files are unavailable; a small
    ViT reaches high clean accuracy within a few epochs.
    """
    rng = np.random.default_rng(seed)
    angles = np.linspace(0, np.pi, num_classes, endpoint=False)
    freqs = 2.0 + 2.0 * (np.arange(num_classes) % 3)
    colors = rng.uniform(0.25, 0.75, size=(num_classes, 3))
    yy, xx = np.mgrid[0:image_size, 0:image_size] / image_size

    def draw(n):
        labels = rng.integers(num_classes, size=n)
        phase = rng.uniform(0, 2 * np.pi, size=n)
        amp = rng.uniform(0.15, 0.3, size=n)
        out = np.empty((n, 3, image_size, image_size), dtype=np.float64)
        for k in range(n):
            c = labels[k]
            u = np.cos(angles[c]) * xx + np.sin(angles[c]) * yy
            wave = amp[k] * np.sin(2 * np.pi * freqs[c] * u + phase[k])
            tint = colors[c] + rng.normal(0, 0.05, size=3)
            out[k] = tint[:, None, None] + wave[None] + rng.normal(0, noise, size=(3, image_size, image_size))
        return (np.clip(out, 0, 1) * 255).round().astype(np.uint8), labels

    classes = tuple(f"class{c}" for c in range(num_classes))
    mean, std = (0.5, 0.5, 0.5), (0.25, 0.25, 0.25)
    xtr, ytr = draw(n_train)
    xte, yte = draw(n_test)
    return _to_set(xtr, ytr, mean, std, classes), _to_set(xte, yte, mean, std, classes)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Yield index arrays; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def random_crop_flip(x: torch.Tensor, rng: np.random.Generator, pad: int = 4) -> torch.Tensor:
    """Standard CIFAR augmentation: reflect-pad crop plus horizontal flip."""
    B, _, H, W = x.shape
    padded = torch.nn.functional.pad(x, (pad, pad, pad, pad), mode="reflect")
    dy = rng.integers(0, 2 * pad + 1, size=B)
    dx = rng.integers(0, 2 * pad + 1, size=B)
    flip = rng.random(B) < 0.5
    out = torch.empty_like(x)
    for b in range(B):
        crop = padded[b, :, dy[b]:dy[b] + H, dx[b]:dx[b] + W]
        out[b] = crop.flip(-1) if flip[b] else crop
    return out
