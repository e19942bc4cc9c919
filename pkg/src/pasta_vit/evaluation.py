"""Attack-effectiveness and stealthiness metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .data import ImageSet
from .trigger import PatchIndex, Trigger, place, selection_from_locations
from .vit import VisionTransformer, attention_map, predict


@dataclass(frozen=True)
class PayloadSpec:
    """How the trigger is activated at inference: ``k`` patches per image,
    either the same ``locations`` for every image (``fixed``) or drawn per image."""

    mode: str = "fixed"
    k: int = 1
    locations: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("fixed", "random"):
            raise ValueError(f"payload mode must be 'fixed' or 'random', got {self.mode!r}")
        if self.k < 1:
            raise ValueError("payload needs k >= 1")
        locs = tuple(PatchIndex(*i) for i in self.locations)
        if self.mode == "fixed" and locs and len(locs) != self.k:
            raise ValueError(f"fixed payload lists {len(locs)} locations but k={self.k}")
        object.__setattr__(self, "locations", locs)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "PayloadSpec":
        """Parse ``fixed:k=10``, ``random:k=20`` or ``fixed:3,4;0,0``."""
        mode, _, rest = text.partition(":")
        if rest.startswith("k="):
            return cls(mode, int(rest[2:]), (), seed)
        if rest:
            locs = tuple(tuple(int(v) for v in part.split(",")) for part in rest.split(";"))
            return cls(mode, len(locs), locs, seed)
        return cls(mode, 1, (), seed)

    def label(self) -> str:
        return f"{self.mode.capitalize()} {self.k} TAL" + ("s" if self.k > 1 else "")

    def selection(self, batch: int, grid: int, rng: np.random.Generator | None = None) -> torch.Tensor:
        """``(batch, n)`` 0/1 matrix of activated patches."""
        n = grid * grid
        if self.k > n:
            raise ValueError(f"payload k={self.k} exceeds {n} patches")
        if self.mode == "fixed":
            if self.locations:
                flat = [i.flat(grid) for i in self.locations]
            else:
                flat = np.random.default_rng(self.seed).permutation(n)[:self.k].tolist()
            return selection_from_locations(np.tile(flat, (batch, 1)), n)
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        picks = np.argsort(rng.random((batch, n)), axis=1)[:, :self.k]
        return selection_from_locations(picks, n)


@dataclass
class TREHeatmap:
    grid: np.ndarray
    tre: float

    @classmethod
    def from_grid(cls, grid) -> "TREHeatmap":
        grid = np.asarray(grid, dtype=np.float64)
        return cls(grid, float(grid.mean()))


@dataclass
class VisualStealth:
    l2: float
    psnr_db: float
    ssim: float
    per_image: dict = field(default_factory=dict, repr=False)


@dataclass
class AttentionStealth:
    l2: float
    apsnr_db: float
    ares: float
    per_image: dict = field(default_factory=dict, repr=False)


@dataclass
class StealthReport:
    visual: VisualStealth | None = None
    attention: AttentionStealth | None = None


def _tv(t) -> torch.Tensor:
    return t.values if isinstance(t, Trigger) else t


def poison_with_payload(data: ImageSet, images: torch.Tensor, t, payload: PayloadSpec,
                        rng: np.random.Generator | None = None, clamp: bool = True,
                        insertion: str = "sup") -> torch.Tensor:
    """Insert ``t`` at the payload's patches, clamped to valid pixels.

    ``insertion="sup"`` adds the trigger; ``"rep"`` replaces the patch pixels.
    """
    if insertion not in ("sup", "rep"):
        raise ValueError(f"insertion must be 'sup' or 'rep', got {insertion!r}")
    tv = _tv(t).to(images.dtype)
    grid = images.shape[-1] // tv.shape[-1]
    sel = payload.selection(images.shape[0], grid, rng).to(images.dtype)
    if insertion == "sup":
        out = images + place(tv, sel, grid)
    else:
        keep = 1.0 - place(torch.ones_like(tv), sel, grid)
        out = images * keep + place(tv, sel, grid)
    return data.clamp_valid(out) if clamp else out


def accuracy(model: VisionTransformer, data: ImageSet, batch_size: int = 256) -> float:
    if len(data) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float((predict(model, data.images, batch_size) == data.labels).float().mean())


def eligible(data: ImageSet, y_tgt: int) -> ImageSet:
    """Samples whose ground truth differs from the target label."""
    keep = np.flatnonzero(data.labels.numpy() != int(y_tgt))
    if keep.size == 0:
        raise ValueError("no samples left after excluding the target class")
    return data.subset(keep)


def asr(model: VisionTransformer, t, data: ImageSet, payload: PayloadSpec, y_tgt: int,
        batch_size: int = 256, insertion: str = "sup") -> float:
    """Fraction of poisoned non-target samples predicted as ``y_tgt``."""
    ev = eligible(data, y_tgt)
    rng = np.random.default_rng(payload.seed)
    hits = 0
    for start in range(0, len(ev), batch_size):
        x = ev.images[start:start + batch_size]
        xp = poison_with_payload(ev, x, t, payload, rng, insertion=insertion)
        hits += int((predict(model, xp, batch_size) == int(y_tgt)).sum())
    return hits / len(ev)


def tre_heatmap(model: VisionTransformer, t, data: ImageSet, y_tgt: int,
                batch_size: int = 256, insertion: str = "sup") -> TREHeatmap:
    """Per-patch single-TAL ASR over every patch; ``tre`` is the grid mean."""
    g = model.config.grid_size
    grid = np.zeros((g, g))
    for flat in range(g * g):
        i = PatchIndex.from_flat(flat, g)
        grid[i.row, i.col] = asr(model, t, data, PayloadSpec("fixed", 1, (i,)), y_tgt, batch_size,
                                   insertion)
    return TREHeatmap.from_grid(grid)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def gaussian_window_1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM with a Gaussian window (reflect-padded, same-size local statistics).

    Accepts ``H x W`` or ``C x H x W``; multi-channel inputs are averaged per channel.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError("SSIM inputs differ in shape")
    if a.ndim == 3:
        return float(np.mean([ssim(a[c], b[c], peak, size, sigma) for c in range(a.shape[0])]))
    w = gaussian_window_1d(size, sigma)

    def filt(img):
        return ndimage.correlate1d(ndimage.correlate1d(img, w, axis=0, mode="reflect"),
                                   w, axis=1, mode="reflect")

    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def visual_stealth(clean_set: ImageSet, t, payload: PayloadSpec, batch_size: int = 256,
                   insertion: str = "sup") -> VisualStealth:
    """l2 / PSNR / SSIM between clean and poisoned images in displayable [0, 1] form."""
    rng = np.random.default_rng(payload.seed)
    l2s, psnrs, ssims = [], [], []
    for start in range(0, len(clean_set), batch_size):
        x = clean_set.images[start:start + batch_size]
        xp = poison_with_payload(clean_set, x, t, payload, rng, insertion=insertion)
        a = clean_set.to_display(x).double().numpy()
        b = clean_set.to_display(xp).double().numpy()
        for ai, bi in zip(a, b):
            l2s.append(float(np.linalg.norm((bi - ai).ravel())))
            psnrs.append(psnr(ai, bi))
            ssims.append(ssim(ai, bi))
    return VisualStealth(float(np.mean(l2s)), float(np.mean(psnrs)), float(np.mean(ssims)),
                         {"l2": l2s, "psnr_db": psnrs, "ssim": ssims})


def _max_normalize(m: torch.Tensor) -> torch.Tensor:
    peak = m.flatten(1).amax(dim=1).reshape(-1, 1, 1)
    return m / peak


def attention_stealth(model: VisionTransformer, clean_set: ImageSet, t, payload: PayloadSpec,
                      layer: int | None = None, batch_size: int = 128,
                      insertion: str = "sup") -> AttentionStealth:
    """Disparity of composed attention maps between clean and poisoned images."""
    layer = model.config.depth if layer is None else layer
    if not 1 <= layer <= model.config.depth:
        raise IndexError(f"layer must be in [1, {model.config.depth}]")
    rng = np.random.default_rng(payload.seed)
    l2s, apsnrs, aress = [], [], []
    with torch.no_grad():
        for start in range(0, len(clean_set), batch_size):
            x = clean_set.images[start:start + batch_size]
            xp = poison_with_payload(clean_set, x, t, payload, rng, insertion=insertion)
            m_c = attention_map(model(x)[1], layer).double()
            m_p = attention_map(model(xp)[1], layer).double()
            l2s.extend(torch.linalg.vector_norm((m_p - m_c).flatten(1), dim=1).tolist())
            d = _max_normalize(m_p) - _max_normalize(m_c)
            mse = d.pow(2).flatten(1).mean(dim=1)
            apsnrs.extend(math.inf if v == 0 else 10 * math.log10(1.0 / v) for v in mse.tolist())
            aress.extend(d.abs().flatten(1).mean(dim=1).tolist())
    return AttentionStealth(float(np.mean(l2s)), float(np.mean(apsnrs)), float(np.mean(aress)),
                            {"l2": l2s, "apsnr_db": apsnrs, "ares": aress})


def emit_heatmap(h: TREHeatmap, path, vmax: float = 1.0) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (6-decimal grid) and ``<path>.pgm`` (8-bit greyscale).

    Grey levels map ``[0, vmax]`` onto ``[0, 255]``.
    """
    if vmax <= 0:
        raise ValueError("vmax must be positive")
    base = _heatmap_base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path, pgm_path = base.with_name(base.name + ".csv"), base.with_name(base.name + ".pgm")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in h.grid:
            w.writerow([f"{v:.6f}" for v in row])
    pix = np.clip(np.round(h.grid / vmax * 255), 0, 255).astype(np.uint8)
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    return csv_path, pgm_path


def _heatmap_base(path) -> Path:
    # only strip a known extension so names like "l2_0.5" survive
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".csv", ".pgm") else p


def read_heatmap(path) -> TREHeatmap:
    base = _heatmap_base(path)
    with open(base.with_name(base.name + ".csv"), newline="") as fh:
        grid = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return TREHeatmap.from_grid(grid)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header, rest = raw.split(b"\n", 3)[:3], raw.split(b"\n", 3)[3]
    w, h = (int(v) for v in header[1].split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)
