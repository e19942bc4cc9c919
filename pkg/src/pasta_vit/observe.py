"""Location and magnitude observations on the trigger effective region.

Four families, each a backdoor training run with a fixed (never optimised)
trigger followed by a TRE heatmap:

* ``rep_sup``: replace vs superimpose insertion at the top-left and centre patch;
* ``l2_sweep``: superimposed trigger at the centre with growing l2 norm;
* ``pairs``: the trigger inserted at one of two diagonal patches per poisoned sample;
* ``corner_pair``: the same with the two opposite corners.

Reference magnitudes are given for 16x16 patches and are rescaled to the model's
patch size by the square root of the patch-area ratio, which keeps the
per-pixel perturbation energy unchanged.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import ImageSet
from .evaluation import TREHeatmap, emit_heatmap, tre_heatmap
from .seeding import derive_seed
from .trainer import AttackConfig, run_fixed_pattern
from .trigger import FixedLocation, LocationSet, PatchIndex, Trigger
from .vit import VisionTransformer

REFERENCE_PATCH = 16
REP_L2 = 20.0
SUP_L2 = 1.0
SWEEP_L2 = (0.5, 1.0, 2.0, 4.0)
FAMILIES = ("rep_sup", "l2_sweep", "pairs", "corner_pair")


@dataclass
class Observation:
    family: str
    name: str
    insertion: str
    locations: tuple
    l2: float
    heatmap: TREHeatmap

    @property
    def tre(self) -> float:
        return self.heatmap.tre


def rescale_l2(l2: float, patch_size: int, reference_patch: int = REFERENCE_PATCH) -> float:
    """Scale a reference l2 norm to another patch size at equal per-pixel energy."""
    return l2 * math.sqrt((patch_size * patch_size) / (reference_patch * reference_patch))


def _stats(data: ImageSet, like: torch.Tensor):
    mean = torch.tensor(data.mean, dtype=like.dtype).reshape(-1, 1, 1)
    std = torch.tensor(data.std, dtype=like.dtype).reshape(-1, 1, 1)
    return mean, std


def sup_pattern(data: ImageSet, channels: int, patch_size: int, l2: float, seed: int) -> Trigger:
    """Random additive pattern whose l2 norm in displayable [0, 1] units equals ``l2``."""
    g = torch.Generator().manual_seed(seed)
    direction = torch.rand(channels, patch_size, patch_size, generator=g) * 2 - 1
    display = direction * (l2 / torch.linalg.vector_norm(direction))
    _, std = _stats(data, display)
    low, high = data.value_range()
    return Trigger(display / std, low, high, seed)


def rep_pattern(data: ImageSet, channels: int, patch_size: int, l2: float, seed: int) -> Trigger:
    """Random replacement patch in [0, 1] display units with l2 norm ``l2`` (before clipping)."""
    g = torch.Generator().manual_seed(seed)
    raw = torch.rand(channels, patch_size, patch_size, generator=g)
    display = (raw * (l2 / torch.linalg.vector_norm(raw))).clamp(0.0, 1.0)
    mean, std = _stats(data, display)
    values = (display - mean) / std
    return Trigger(values, float(values.min()), float(values.max()), seed)


def pair_sets(grid: int) -> list[tuple]:
    """Diagonal location pairs ``(d, d)`` and ``(g-1-d, g-1-d)``."""
    if grid == 14:
        offsets = (3, 5, 6)
    else:
        offsets = tuple(range(max(1, grid // 2 - 3), grid // 2))
    return [((d, d), (grid - 1 - d, grid - 1 - d)) for d in offsets]


def _train_and_map(model0, train, test, attack, trigger, sampler, insertion, progress):
    res = run_fixed_pattern(model0, train, attack, trigger, sampler, insertion=insertion,
                            progress=progress)
    return tre_heatmap(res.model, res.trigger, test, attack.target, insertion=insertion)


def run_observations(model0: VisionTransformer, train: ImageSet, test: ImageSet,
                     attack: AttackConfig, out_dir, families=FAMILIES, l2_scale: float = 1.0,
                     progress=None) -> list[Observation]:
    """Run the requested families; writes one heatmap pair per run and ``summary.csv``.

    ``l2_scale`` multiplies every rescaled magnitude, for models whose sensitivity
    differs from the reference setting.
    """
    if model0 is None:
        raise ValueError("observations need a trained clean model")
    bad = [f for f in families if f not in FAMILIES]
    if bad:
        raise ValueError(f"unknown observation families {bad}; choose from {FAMILIES}")
    cfg = model0.config
    g, p, C = cfg.grid_size, cfg.patch_size, cfg.channels
    centre = (g // 2, g // 2)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = attack.seed
    sup_seed = derive_seed(seed, "observe", "sup-pattern")

    def l2_of(ref):
        return rescale_l2(ref, p) * l2_scale

    base_sup = sup_pattern(train, C, p, 1.0, sup_seed)

    def sup_at(l2):
        return Trigger(base_sup.values * l2, base_sup.low, base_sup.high, base_sup.seed)

    results: list[Observation] = []

    def record(family, name, insertion, locs, l2, heat):
        results.append(Observation(family, name, insertion, tuple(locs), l2, heat))
        emit_heatmap(heat, out / f"{family}_{name}")
        if progress:
            progress(f"{family}/{name}: TRE {heat.tre:.4f}")

    if "rep_sup" in families:
        rep = rep_pattern(train, C, p, l2_of(REP_L2), derive_seed(seed, "observe", "rep-pattern"))
        for loc_name, loc in (("topleft", (0, 0)), ("centre", centre)):
            heat = _train_and_map(model0, train, test, attack, rep, FixedLocation(loc), "rep", progress)
            record("rep_sup", f"rep_{loc_name}", "rep", [loc], l2_of(REP_L2), heat)
            t = sup_at(l2_of(SUP_L2))
            heat = _train_and_map(model0, train, test, attack, t, FixedLocation(loc), "sup", progress)
            record("rep_sup", f"sup_{loc_name}", "sup", [loc], l2_of(SUP_L2), heat)
    if "l2_sweep" in families:
        for ref in SWEEP_L2:
            heat = _train_and_map(model0, train, test, attack, sup_at(l2_of(ref)),
                                  FixedLocation(centre), "sup", progress)
            record("l2_sweep", f"l2_{ref:g}", "sup", [centre], l2_of(ref), heat)
    t1 = sup_at(l2_of(SUP_L2))
    if "pairs" in families:
        for a, b in pair_sets(g):
            heat = _train_and_map(model0, train, test, attack, t1, LocationSet((a, b)), "sup", progress)
            record("pairs", f"pair_{a[0]}_{b[0]}", "sup", [a, b], l2_of(SUP_L2), heat)
    if "corner_pair" in families:
        a, b = (0, 0), (g - 1, g - 1)
        heat = _train_and_map(model0, train, test, attack, t1, LocationSet((a, b)), "sup", progress)
        record("corner_pair", f"pair_0_{g - 1}", "sup", [a, b], l2_of(SUP_L2), heat)
    write_summary(results, out / "summary.csv")
    return results


def write_summary(results: list[Observation], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "name", "insertion", "locations", "l2", "tre"])
        for r in results:
            locs = ";".join(f"{i[0]},{i[1]}" for i in (PatchIndex(*x) for x in r.locations))
            w.writerow([r.family, r.name, r.insertion, locs, f"{r.l2:.6f}", f"{r.tre:.6f}"])
    return path


def sweep_is_monotone(tres, max_inversions: int = 1, tolerance: float = 0.02) -> bool:
    """Non-decreasing up to ``max_inversions`` drops of at most ``tolerance`` each."""
    drops = [a - b for a, b in zip(tres, tres[1:]) if b < a]
    return len(drops) <= max_inversions and all(d <= tolerance for d in drops)
