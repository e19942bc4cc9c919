"""Patch-wise triggers: masks, insertion modes, bounds and the location sampler."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .vit import ConfigError, DimensionError, ModelConfig

TRIG_VERSION = "pasta-trig-v1"


class PatchIndex(NamedTuple):
    row: int
    col: int

    def flat(self, grid: int) -> int:
        return self.row * grid + self.col

    @classmethod
    def from_flat(cls, index: int, grid: int) -> "PatchIndex":
        return cls(int(index) // grid, int(index) % grid)


def _check_index(i, grid: int) -> PatchIndex:
    i = PatchIndex(*i)
    if not (0 <= i.row < grid and 0 <= i.col < grid):
        raise IndexError(f"patch {tuple(i)} outside {grid}x{grid} grid")
    return i


@dataclass
class Trigger:
    """Additive ``C x p x p`` perturbation with scalar elementwise bounds."""

    values: torch.Tensor
    low: float
    high: float
    seed: int | None = None

    def __post_init__(self):
        if self.low > self.high:
            raise ValueError(f"lower bound {self.low} exceeds upper bound {self.high}")
        if self.values.dim() != 3 or self.values.shape[1] != self.values.shape[2]:
            raise DimensionError(f"trigger must be C x p x p, got {tuple(self.values.shape)}")

    @property
    def patch_size(self) -> int:
        return self.values.shape[-1]

    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.values))

    @classmethod
    def initialize(cls, config: ModelConfig, low: float, high: float, seed: int,
                   scale: float = 0.05) -> "Trigger":
        """Uniform in ``[-scale, scale]`` then clamped into the bounds."""
        gen = torch.Generator().manual_seed(int(seed))
        shape = (config.channels, config.patch_size, config.patch_size)
        values = (torch.rand(shape, generator=gen) * 2 - 1) * scale
        lo, hi = inward_bounds(low, high, values.dtype)
        return cls(values.clamp(lo, hi), float(low), float(high), int(seed))


def make_mask(i, config: ModelConfig) -> torch.Tensor:
    """Binary ``H x W`` mask selecting patch ``i``."""
    g, p = config.grid_size, config.patch_size
    r, c = _check_index(i, g)
    mask = torch.zeros(config.image_size, config.image_size)
    mask[r * p:(r + 1) * p, c * p:(c + 1) * p] = 1.0
    return mask


def place(t: torch.Tensor, selection: torch.Tensor, grid: int) -> torch.Tensor:
    """Tile ``t`` into the patches picked by ``selection``.

    ``selection`` is ``(B, n)`` with 0/1 entries (several ones per row put the
    same trigger into several patches). Returns ``(B, C, H, W)``.
    """
    C, p, _ = t.shape
    B = selection.shape[0]
    sel = selection.to(t.dtype).reshape(B, grid, grid)
    out = sel[:, None, :, None, :, None] * t[None, :, None, :, None, :]
    return out.reshape(B, C, grid * p, grid * p)


def selection_from_locations(locations, num_patches: int, dtype=torch.float32) -> torch.Tensor:
    """One-hot ``(B, n)`` selection from flat indices (``B`` ints or ``B x k``)."""
    loc = torch.as_tensor(np.asarray(locations), dtype=torch.long)
    if loc.dim() == 1:
        loc = loc[:, None]
    sel = torch.zeros(loc.shape[0], num_patches, dtype=dtype)
    sel.scatter_(1, loc, 1.0)
    return sel


def insert_sup(x: torch.Tensor, t, i) -> torch.Tensor:
    """``x + M_i * t`` for one image ``C x H x W`` or a batch. Not clamped."""
    tv = t.values if isinstance(t, Trigger) else t
    p = tv.shape[-1]
    if x.shape[-3] != tv.shape[0]:
        raise DimensionError("trigger and image channel counts differ")
    g = x.shape[-1] // p
    r, c = _check_index(i, g)
    out = x.clone()
    out[..., r * p:(r + 1) * p, c * p:(c + 1) * p] = (
        out[..., r * p:(r + 1) * p, c * p:(c + 1) * p] + tv
    )
    return out


def insert_sup_batch(x: torch.Tensor, t, locations) -> torch.Tensor:
    """Per-sample additive insertion; ``locations`` holds flat indices per sample."""
    tv = t.values if isinstance(t, Trigger) else t
    p = tv.shape[-1]
    g = x.shape[-1] // p
    sel = selection_from_locations(locations, g * g, dtype=x.dtype)
    if sel.shape[0] != x.shape[0]:
        raise DimensionError("one location entry per sample required")
    return x + place(tv.to(x.dtype), sel, g)


def insert_rep(x: torch.Tensor, pattern: torch.Tensor, i) -> torch.Tensor:
    """Replace patch ``i`` with ``pattern``."""
    p = pattern.shape[-1]
    if pattern.dim() != 3 or x.shape[-3] != pattern.shape[0]:
        raise DimensionError("pattern must be C x p x p matching image channels")
    g = x.shape[-1] // p
    r, c = _check_index(i, g)
    out = x.clone()
    out[..., r * p:(r + 1) * p, c * p:(c + 1) * p] = pattern
    return out


def insert_rep_batch(x: torch.Tensor, pattern: torch.Tensor, locations) -> torch.Tensor:
    p = pattern.shape[-1]
    g = x.shape[-1] // p
    sel = selection_from_locations(locations, g * g, dtype=x.dtype)
    keep = 1.0 - place(torch.ones_like(pattern, dtype=x.dtype), sel, g)
    return x * keep + place(pattern.to(x.dtype), sel, g)


def insert_blend(x: torch.Tensor, m: float, t: torch.Tensor) -> torch.Tensor:
    """Whole-image blend ``x (1 - m) + t m``."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"blend ratio must lie in [0, 1], got {m}")
    if t.shape[-3:] != x.shape[-3:]:
        raise DimensionError("blend pattern must match the image shape")
    return x * (1 - m) + t * m


@dataclass(frozen=True)
class MISConfig:
    """Candidate centre and corner patches for hierarchical location sampling."""

    center: tuple = field(default_factory=tuple)
    corner: tuple = field(default_factory=tuple)

    def __post_init__(self):
        center = tuple(PatchIndex(*i) for i in self.center)
        corner = tuple(PatchIndex(*i) for i in self.corner)
        if not center or not corner:
            raise ConfigError("both candidate sets must be non-empty")
        if set(center) & set(corner):
            raise ConfigError("centre and corner sets must be disjoint")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "corner", corner)

    def validate(self, grid: int) -> None:
        for i in self.center + self.corner:
            _check_index(i, grid)

    def probabilities(self, grid: int) -> np.ndarray:
        """Exact per-patch selection probabilities as a flat length-n vector."""
        probs = np.zeros(grid * grid)
        top = len(self.center) + 1
        for i in self.center:
            probs[i.flat(grid)] += 1.0 / top
        for i in self.corner:
            probs[i.flat(grid)] += 1.0 / (top * len(self.corner))
        return probs

    def to_dict(self) -> dict:
        return {"center": [list(i) for i in self.center], "corner": [list(i) for i in self.corner]}

    @classmethod
    def from_dict(cls, d: dict) -> "MISConfig":
        return cls(tuple(map(tuple, d["center"])), tuple(map(tuple, d["corner"])))


def mis_sample(mis: MISConfig, rng: np.random.Generator, size: int | None = None):
    """Draw a patch: uniform over the centre set plus the corner set as one
    bucket, then uniform inside the corner bucket if it was drawn.

    Returns a ``PatchIndex`` or, with ``size``, a list of them.
    """
    if size is None:
        return mis_sample(mis, rng, 1)[0]
    nc = len(mis.center)
    top = rng.integers(nc + 1, size=size)
    inner = rng.integers(len(mis.corner), size=size)
    return [mis.center[a] if a < nc else mis.corner[b] for a, b in zip(top, inner)]


def default_mis(config_or_grid) -> MISConfig:
    """Quadrant centres plus image centre, and the four corners."""
    g = config_or_grid.grid_size if isinstance(config_or_grid, ModelConfig) else int(config_or_grid)
    if g < 4:
        raise ConfigError(f"grid size {g} too small for the default location sets (needs >= 4)")
    q = g // 4
    r = g - 1 - q
    c = g // 2
    center = []
    for i in [(q, q), (q, r), (c, c), (r, q), (r, r)]:
        if i not in center:
            center.append(i)
    corner = [(0, 0), (0, g - 1), (g - 1, 0), (g - 1, g - 1)]
    return MISConfig(tuple(center), tuple(corner))


@dataclass(frozen=True)
class FixedLocation:
    """Sampler that always returns one patch (single-location baseline)."""

    location: PatchIndex

    def __post_init__(self):
        object.__setattr__(self, "location", PatchIndex(*self.location))

    def validate(self, grid: int) -> None:
        _check_index(self.location, grid)

    def sample_flat(self, rng: np.random.Generator, size: int, grid: int) -> np.ndarray:
        return np.full(size, self.location.flat(grid), dtype=np.int64)

    def to_dict(self) -> dict:
        return {"fixed": list(self.location)}


@dataclass(frozen=True)
class LocationSet:
    """Sampler that picks one of a few patches uniformly per poisoned sample."""

    locations: tuple

    def __post_init__(self):
        locs = tuple(PatchIndex(*i) for i in self.locations)
        if not locs:
            raise ConfigError("location set must be non-empty")
        if len(set(locs)) != len(locs):
            raise ConfigError("location set contains duplicates")
        object.__setattr__(self, "locations", locs)

    def validate(self, grid: int) -> None:
        for i in self.locations:
            _check_index(i, grid)

    def sample_flat(self, rng: np.random.Generator, size: int, grid: int) -> np.ndarray:
        flat = np.array([i.flat(grid) for i in self.locations], dtype=np.int64)
        return flat[rng.integers(len(flat), size=size)]

    def to_dict(self) -> dict:
        return {"set": [list(i) for i in self.locations]}


def sample_locations(sampler, rng: np.random.Generator, size: int, grid: int) -> np.ndarray:
    """Flat indices of ``size`` locations drawn from a MISConfig, FixedLocation or LocationSet."""
    if isinstance(sampler, (FixedLocation, LocationSet)):
        return sampler.sample_flat(rng, size, grid)
    return np.array([i.flat(grid) for i in mis_sample(sampler, rng, size)], dtype=np.int64)


def scale_to_l2(t: Trigger, target: float) -> Trigger:
    norm = torch.linalg.vector_norm(t.values)
    if float(norm) == 0.0:
        raise ValueError("cannot rescale an all-zero trigger")
    return Trigger(t.values * (target / norm), t.low, t.high, t.seed)


def inward_bounds(low: float, high: float, dtype: torch.dtype) -> tuple[float, float]:
    """Bounds rounded inwards to values representable in ``dtype``, so clamped
    tensors satisfy ``low <= v <= high`` exactly when compared in double precision."""
    lo = torch.tensor(low, dtype=dtype)
    hi = torch.tensor(high, dtype=dtype)
    if float(lo) < low:
        lo = torch.nextafter(lo, torch.tensor(float("inf"), dtype=dtype))
    if float(hi) > high:
        hi = torch.nextafter(hi, torch.tensor(float("-inf"), dtype=dtype))
    if float(lo) > float(hi):
        # no representable value inside: fall back to the nearest one
        lo = hi = torch.tensor(low, dtype=dtype)
    return float(lo), float(hi)


def clamp_trigger(t: Trigger) -> Trigger:
    if t.low > t.high:
        raise ValueError(f"lower bound {t.low} exceeds upper bound {t.high}")
    lo, hi = inward_bounds(t.low, t.high, t.values.dtype)
    return Trigger(t.values.clamp(lo, hi), t.low, t.high, t.seed)


def save_trigger(t: Trigger, path, mis=None) -> Path:
    path = Path(path)
    meta = {
        "version": TRIG_VERSION,
        "shape": list(t.values.shape),
        "low": t.low,
        "high": t.high,
        "seed": t.seed,
        "mis": mis.to_dict() if mis is not None else None,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)),
                 values=t.values.detach().cpu().numpy().astype("<f4"))
    return path


def load_trigger(path):
    """Return ``(trigger, sampler_or_None)``."""
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != TRIG_VERSION:
            raise ValueError(f"{path}: unsupported trigger version {meta.get('version')!r}")
        values = torch.from_numpy(data["values"].astype(np.float32)).reshape(meta["shape"])
    mis = None
    if meta.get("mis"):
        m = meta["mis"]
        if "fixed" in m:
            mis = FixedLocation(tuple(m["fixed"]))
        elif "set" in m:
            mis = LocationSet(tuple(map(tuple, m["set"])))
        else:
            mis = MISConfig.from_dict(m)
    return Trigger(values, meta["low"], meta["high"], meta.get("seed")), mis


def locations_as_indices(locations: Sequence, grid: int) -> list[int]:
    return [PatchIndex(*i).flat(grid) if not isinstance(i, (int, np.integer)) else int(i)
            for i in locations]
