"""Loss terms for trigger and model optimisation.

All losses are batch means. The two weights follow the training-loop
convention by default: ``alpha1`` scales the visual term and ``alpha2`` the
attention term. ``LossWeights(reading="equation")`` swaps those roles.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .trigger import Trigger, insert_rep_batch, insert_sup_batch, sample_locations
from .vit import VisionTransformer, attention_map


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 0.005
    reading: str = "algorithm"

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.reading not in ("algorithm", "equation"):
            raise ValueError(f"unknown weight reading {self.reading!r}")

    @property
    def visual(self) -> float:
        return self.alpha1 if self.reading == "algorithm" else self.alpha2

    @property
    def attention(self) -> float:
        return self.alpha2 if self.reading == "algorithm" else self.alpha1


@dataclass
class LossReport:
    l_clean: torch.Tensor
    l_backdoor: torch.Tensor
    l_visual: torch.Tensor
    l_attention: torch.Tensor
    aggregate: torch.Tensor
    locations: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def row(self) -> dict:
        return {
            "L_c": float(self.l_clean.detach()),
            "L_bd": float(self.l_backdoor.detach()),
            "L_vis": float(self.l_visual.detach()),
            "L_attn": float(self.l_attention.detach()),
            "aggregate": float(self.aggregate.detach()),
        }


@contextlib.contextmanager
def frozen(model: VisionTransformer):
    """Temporarily stop gradients to the model parameters."""
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)


def _tvalues(t):
    return t.values if isinstance(t, Trigger) else t


def _resolve_layer(model: VisionTransformer, layer: int | None) -> int:
    depth = model.config.depth
    layer = depth if layer is None else int(layer)
    if not 1 <= layer <= depth:
        raise IndexError(f"disparity layer must be in [1, {depth}], got {layer}")
    return layer


def _locations(sampler, rng, size, grid, locations):
    if locations is not None:
        loc = np.asarray(locations, dtype=np.int64)
        if loc.shape[0] != size:
            raise ValueError("need one location per sample")
        return loc
    if rng is None:
        raise ValueError("either locations or a random generator is required")
    return sample_locations(sampler, rng, size, grid)


def _zero(like: torch.Tensor) -> torch.Tensor:
    return like.new_zeros(())


def disparity(map_poison: torch.Tensor, map_clean: torch.Tensor, class_row_only: bool = False):
    """Per-sample Frobenius norm of the difference of composed attention maps."""
    diff = map_poison - map_clean
    if class_row_only:
        diff = diff[..., :1, :]
    return torch.linalg.vector_norm(diff.flatten(1), dim=1)


def loss_clean(model: VisionTransformer, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if images.shape[0] == 0:
        return images.new_zeros(())
    logits, _ = model(images, keep_attention=False)
    return F.cross_entropy(logits, labels)


def _check_target(model, y_tgt):
    if not 0 <= int(y_tgt) < model.config.num_classes:
        raise ValueError(f"target label {y_tgt} outside [0, {model.config.num_classes})")


def loss_backdoor(model, images, t, mis, y_tgt: int, rng=None, locations=None) -> torch.Tensor:
    _check_target(model, y_tgt)
    loc = _locations(mis, rng, images.shape[0], model.config.grid_size, locations)
    poisoned = insert_sup_batch(images, _tvalues(t), loc)
    target = torch.full((images.shape[0],), int(y_tgt), dtype=torch.long)
    logits, _ = model(poisoned, keep_attention=False)
    return F.cross_entropy(logits, target)


def loss_visual(images, t, mis, rng=None, locations=None) -> torch.Tensor:
    tv = _tvalues(t)
    grid = images.shape[-1] // tv.shape[-1]
    loc = _locations(mis, rng, images.shape[0], grid, locations)
    diff = insert_sup_batch(images, tv, loc) - images
    return torch.linalg.vector_norm(diff.flatten(1), dim=1).mean()


def loss_attention(model, images, t, mis, layer: int | None = None, rng=None, locations=None,
                   class_row_only: bool = False) -> torch.Tensor:
    layer = _resolve_layer(model, layer)
    loc = _locations(mis, rng, images.shape[0], model.config.grid_size, locations)
    poisoned = insert_sup_batch(images, _tvalues(t), loc)
    _, a_p = model(poisoned)
    _, a_c = model(images)
    d = disparity(attention_map(a_p, layer), attention_map(a_c, layer), class_row_only)
    return d.mean()


def _poison_terms(model, images, tv, loc, y_tgt, layer, class_row_only, need_attn,
                  clean_side_grad: bool, insertion: str = "sup"):
    """L_bd, L_vis, L_attn over one batch of poisoned samples."""
    if insertion == "sup":
        poisoned = insert_sup_batch(images, tv, loc)
    elif insertion == "rep":
        poisoned = insert_rep_batch(images, tv, loc)
    else:
        raise ValueError(f"unknown insertion mode {insertion!r}")
    logits, a_p = model(poisoned, keep_attention=need_attn)
    target = torch.full((images.shape[0],), int(y_tgt), dtype=torch.long)
    l_bd = F.cross_entropy(logits, target)
    l_vis = torch.linalg.vector_norm((poisoned - images).flatten(1), dim=1).mean()
    if need_attn:
        ctx = contextlib.nullcontext() if clean_side_grad else torch.no_grad()
        with ctx:
            _, a_c = model(images)
            m_c = attention_map(a_c, layer)
        l_attn = disparity(attention_map(a_p, layer), m_c, class_row_only).mean()
    else:
        l_attn = _zero(l_bd)
    return l_bd, l_vis, l_attn


def trigger_objective(model, images, t, weights: LossWeights, mis, y_tgt: int,
                      layer: int | None = None, rng=None, locations=None,
                      class_row_only: bool = False, attention_term: bool = True) -> LossReport:
    """``L_bd + w_vis L_vis + w_attn L_attn`` with gradients reaching ``t`` only."""
    _check_target(model, y_tgt)
    layer = _resolve_layer(model, layer)
    tv = _tvalues(t)
    loc = _locations(mis, rng, images.shape[0], model.config.grid_size, locations)
    with frozen(model):
        l_bd, l_vis, l_attn = _poison_terms(model, images, tv, loc, y_tgt, layer, class_row_only,
                                            need_attn=True, clean_side_grad=False)
    w_attn = weights.attention if attention_term else 0.0
    agg = l_bd + weights.visual * l_vis + w_attn * l_attn
    return LossReport(_zero(l_bd), l_bd, l_vis, l_attn, agg, loc)


def model_objective(model, clean_images, clean_labels, poison_images, t, weights: LossWeights,
                    mis, y_tgt: int, layer: int | None = None, rng=None, locations=None,
                    class_row_only: bool = False, attention_term: bool = True,
                    insertion: str = "sup") -> LossReport:
    """``L_c + L_bd + w_attn L_attn`` with the trigger held fixed.

    ``insertion="rep"`` treats ``t`` as a replacement pattern (patch-replacement
    baseline) instead of an additive perturbation.
    """
    _check_target(model, y_tgt)
    layer = _resolve_layer(model, layer)
    tv = _tvalues(t).detach()
    l_c = loss_clean(model, clean_images, clean_labels)
    if poison_images.shape[0] == 0:
        z = _zero(l_c)
        return LossReport(l_c, z, z, z, l_c, np.empty(0, dtype=np.int64))
    loc = _locations(mis, rng, poison_images.shape[0], model.config.grid_size, locations)
    l_bd, l_vis, l_attn = _poison_terms(model, poison_images, tv, loc, y_tgt, layer,
                                        class_row_only, need_attn=True, clean_side_grad=True,
                                        insertion=insertion)
    w_attn = weights.attention if attention_term else 0.0
    agg = l_c + l_bd + w_attn * l_attn
    return LossReport(l_c, l_bd, l_vis.detach(), l_attn, agg, loc)


def single_level_objective(model, clean_images, clean_labels, poison_images, t,
                           weights: LossWeights, mis, y_tgt: int, layer: int | None = None,
                           rng=None, locations=None, class_row_only: bool = False) -> LossReport:
    """Joint objective over model and trigger (ablation baseline)."""
    _check_target(model, y_tgt)
    layer = _resolve_layer(model, layer)
    tv = _tvalues(t)
    l_c = loss_clean(model, clean_images, clean_labels)
    if poison_images.shape[0] == 0:
        z = _zero(l_c)
        return LossReport(l_c, z, z, z, l_c, np.empty(0, dtype=np.int64))
    loc = _locations(mis, rng, poison_images.shape[0], model.config.grid_size, locations)
    l_bd, l_vis, l_attn = _poison_terms(model, poison_images, tv, loc, y_tgt, layer,
                                        class_row_only, need_attn=True, clean_side_grad=True)
    agg = l_c + l_bd + weights.visual * l_vis + weights.attention * l_attn
    return LossReport(l_c, l_bd, l_vis, l_attn, agg, loc)

