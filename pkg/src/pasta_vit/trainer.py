"""Alternating trigger/model training, clean pretraining and baselines."""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import ImageSet, iterate_batches, random_crop_flip
from .objectives import LossWeights, model_objective, single_level_objective, trigger_objective
from .seeding import derive_seed
from .trigger import (FixedLocation, MISConfig, PatchIndex, Trigger, clamp_trigger, default_mis,
                      inward_bounds, save_trigger)
from .vit import ConfigError, ModelConfig, VisionTransformer, init_model, predict, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "phase", "pass", "L_c", "L_bd", "L_vis", "L_attn", "aggregate", "seed")


class TrainingDiverged(RuntimeError):
    """A loss became non-finite."""


@dataclass
class AttackConfig:
    epochs: int = 20
    trigger_epochs: int = 3
    model_epochs: int = 5
    lr_trigger: float = 0.01
    lr_model: float = 2e-5
    betas: tuple = (0.99, 0.99)
    eps: float = 1e-6
    weight_decay: float = 2e-5
    poison_ratio: float = 0.02
    trigger_fraction: float = 0.05
    target: int = 7
    batch_size: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    layer: int | None = None
    class_row_only: bool = False
    trigger_init_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.trigger_epochs < 0 or self.model_epochs < 0:
            raise ConfigError("epochs must be >= 1 and per-phase epochs >= 0")
        if not 0 < self.poison_ratio <= 1:
            raise ConfigError(f"poison ratio must lie in (0, 1], got {self.poison_ratio}")
        if not 0 < self.trigger_fraction <= 1:
            raise ConfigError(f"trigger fraction must lie in (0, 1], got {self.trigger_fraction}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainResult:
    model: VisionTransformer
    trigger: Trigger
    log: list = field(default_factory=list)
    phase_seconds: dict = field(default_factory=dict)
    locations: list = field(default_factory=list)
    checksums: list = field(default_factory=list)
    partition: tuple = ()
    insertion: str = "sup"


@dataclass
class PretrainResult:
    model: VisionTransformer
    val_accuracy: float | None
    losses: list = field(default_factory=list)


def param_checksum(model: VisionTransformer) -> str:
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def tensor_checksum(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().numpy().tobytes()).hexdigest()


def _finite(value: torch.Tensor, where: str):
    if not torch.isfinite(value):
        raise TrainingDiverged(f"non-finite loss during {where}: {float(value)}")


def pretrain_clean(config: ModelConfig, data: ImageSet, epochs: int, seed: int,
                   val: ImageSet | None = None, lr: float = 1e-3, weight_decay: float = 0.05,
                   batch_size: int = 128, augment: bool = True, checkpoint: str | Path | None = None,
                   progress=None) -> PretrainResult:
    """Train a clean classifier from a seeded initialisation (AdamW, cosine decay)."""
    model = init_model(config, seed)
    losses = []
    if epochs > 0:
        rng = np.random.default_rng(derive_seed(seed, "pretrain"))
        opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
        steps = epochs * math.ceil(len(data) / batch_size)
        sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps,
                                                    pct_start=0.1, anneal_strategy="cos")
        model.train()
        for epoch in range(epochs):
            total, count = 0.0, 0
            for idx in iterate_batches(len(data), batch_size, rng):
                t = torch.from_numpy(idx)
                x = data.images[t]
                if augment:
                    x = random_crop_flip(x, rng)
                logits, _ = model(x, keep_attention=False)
                loss = torch.nn.functional.cross_entropy(logits, data.labels[t])
                _finite(loss, f"pretraining epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                total += float(loss.detach()) * len(idx)
                count += len(idx)
            losses.append(total / count)
            if progress:
                progress(f"pretrain epoch {epoch + 1}/{epochs} loss {losses[-1]:.4f}")
        model.eval()
    acc = None
    if val is not None and len(val):
        acc = float((predict(model, val.images) == val.labels).float().mean())
    if checkpoint is not None:
        save_checkpoint(model, checkpoint, extra={"val_accuracy": acc, "epochs": epochs})
    return PretrainResult(model, acc, losses)


def poison_partition(n: int, poison_ratio: float, trigger_fraction: float, seed: int):
    """Split ``range(n)`` into clean and poisoned indices plus an independent
    trigger-optimisation sample. Returns sorted ``(D_c, D_bd, D_trig)``."""
    if not 0 < poison_ratio <= 1:
        raise ValueError(f"poison ratio must lie in (0, 1], got {poison_ratio}")
    if not 0 < trigger_fraction <= 1:
        raise ValueError(f"trigger fraction must lie in (0, 1], got {trigger_fraction}")
    rng = np.random.default_rng(derive_seed(seed, "partition"))
    n_bd = max(1, int(round(poison_ratio * n)))
    bd = np.sort(rng.choice(n, size=n_bd, replace=False))
    clean = np.setdiff1d(np.arange(n), bd)
    n_trig = max(1, int(round(trigger_fraction * n)))
    trig = np.sort(rng.choice(n, size=n_trig, replace=False))
    return clean, bd, trig


def _mean_rows(rows: list[dict]) -> dict:
    keys = ("L_c", "L_bd", "L_vis", "L_attn", "aggregate")
    return {k: float(np.mean([r[k] for r in rows])) if rows else 0.0 for k in keys}


def _adaptive_train(model0: VisionTransformer, data: ImageSet, attack: AttackConfig, sampler, *,
                    optimize_trigger: bool = True, attention_term: bool = True,
                    insertion: str = "sup", trigger: Trigger | None = None,
                    out_dir: str | Path | None = None, progress=None) -> TrainResult:
    model = copy.deepcopy(model0)
    model.train()
    cfg = model.config
    if not 0 <= attack.target < cfg.num_classes:
        raise ConfigError(f"target label {attack.target} outside [0, {cfg.num_classes})")
    sampler.validate(cfg.grid_size)
    seed = attack.seed
    low, high = data.value_range()
    if trigger is None:
        trigger = Trigger.initialize(cfg, low, high, derive_seed(seed, "trigger-init"),
                                     attack.trigger_init_scale)
    t_param = torch.nn.Parameter(trigger.values.detach().clone())
    clean_idx, bd_idx, trig_idx = poison_partition(len(data), attack.poison_ratio,
                                                   attack.trigger_fraction, seed)
    is_bd = np.zeros(len(data), dtype=bool)
    is_bd[bd_idx] = True

    opt_t = torch.optim.SGD([t_param], lr=attack.lr_trigger)
    opt_m = torch.optim.AdamW(model.parameters(), lr=attack.lr_model, betas=attack.betas,
                              eps=attack.eps, weight_decay=attack.weight_decay)
    loc_rng = np.random.default_rng(derive_seed(seed, "locations"))
    order_rng = np.random.default_rng(derive_seed(seed, "order"))
    result = TrainResult(model, trigger, partition=(clean_idx, bd_idx, trig_idx),
                         insertion=insertion)
    result.phase_seconds = {"trigger": 0.0, "model": 0.0}
    out = Path(out_dir) if out_dir is not None else None

    def current_trigger():
        return Trigger(t_param.detach().clone(), low, high, trigger.seed)

    def snapshot(epoch):
        if out is None:
            return
        save_checkpoint(model, out / f"model_epoch{epoch:03d}.npz", extra={"epoch": epoch})
        save_trigger(current_trigger(), out / f"trigger_epoch{epoch:03d}.npz", sampler)

    try:
        for epoch in range(attack.epochs):
            start = time.perf_counter()
            for k in range(attack.trigger_epochs):
                theta_before = param_checksum(model)
                rows = []
                if optimize_trigger:
                    for idx in iterate_batches(len(trig_idx), attack.batch_size, order_rng):
                        x = data.images[torch.from_numpy(trig_idx[idx])]
                        rep = trigger_objective(model, x, t_param, attack.weights, sampler,
                                                attack.target, attack.layer, loc_rng,
                                                class_row_only=attack.class_row_only,
                                                attention_term=attention_term)
                        _finite(rep.aggregate, f"trigger phase, epoch {epoch}")
                        opt_t.zero_grad()
                        rep.aggregate.backward()
                        opt_t.step()
                        with torch.no_grad():
                            t_param.clamp_(*inward_bounds(low, high, t_param.dtype))
                        assert low <= float(t_param.detach().min()) and float(t_param.detach().max()) <= high
                        rows.append(rep.row())
                        result.locations.extend(rep.locations.tolist())
                theta_after = param_checksum(model)
                if theta_after != theta_before:
                    raise RuntimeError("model parameters changed during a trigger phase")
                result.checksums.append(("trigger", epoch, k, theta_before, theta_after))
                result.log.append({"epoch": epoch, "phase": "trigger", "pass": k,
                                   **_mean_rows(rows), "seed": seed})
            mid = time.perf_counter()
            result.phase_seconds["trigger"] += mid - start
            for k in range(attack.model_epochs):
                t_before = tensor_checksum(t_param)
                rows = []
                for idx in iterate_batches(len(data), attack.batch_size, order_rng):
                    bd = is_bd[idx]
                    ci = torch.from_numpy(idx[~bd])
                    pi = torch.from_numpy(idx[bd])
                    rep = model_objective(model, data.images[ci], data.labels[ci],
                                          data.images[pi], t_param, attack.weights, sampler,
                                          attack.target, attack.layer, loc_rng,
                                          class_row_only=attack.class_row_only,
                                          attention_term=attention_term, insertion=insertion)
                    _finite(rep.aggregate, f"model phase, epoch {epoch}")
                    opt_m.zero_grad()
                    rep.aggregate.backward()
                    opt_m.step()
                    rows.append(rep.row())
                    result.locations.extend(rep.locations.tolist())
                t_after = tensor_checksum(t_param)
                if t_after != t_before:
                    raise RuntimeError("trigger changed during a model phase")
                result.checksums.append(("model", epoch, k, t_before, t_after))
                result.log.append({"epoch": epoch, "phase": "model", "pass": k,
                                   **_mean_rows(rows), "seed": seed})
            result.phase_seconds["model"] += time.perf_counter() - mid
            snapshot(epoch)
            if progress:
                last = result.log[-1] if result.log else {}
                progress(f"epoch {epoch + 1}/{attack.epochs} "
                         f"L_bd {last.get('L_bd', float('nan')):.4f} |t| {t_param.norm():.4f}")
    except TrainingDiverged:
        if out is not None:
            log.error("training diverged; last good snapshot kept in %s", out)
        raise
    model.eval()
    result.trigger = clamp_trigger(current_trigger())
    return result


def run_pasta(params0: VisionTransformer, data: ImageSet, attack: AttackConfig,
              mis: MISConfig | None = None, **kw) -> TrainResult:
    """Alternate short trigger and model phases with hierarchical location sampling."""
    sampler = mis if mis is not None else default_mis(params0.config)
    return _adaptive_train(params0, data, attack, sampler, **kw)


def run_single_location_baseline(params0, data, attack: AttackConfig, location, **kw) -> TrainResult:
    """Same training loop, but every poisoned sample uses one fixed patch."""
    return _adaptive_train(params0, data, attack, FixedLocation(PatchIndex(*location)), **kw)


def run_no_attn_ablation(params0, data, attack: AttackConfig, mis: MISConfig | None = None,
                         **kw) -> TrainResult:
    """Full alternating training with the attention term weighted by zero in both phases."""
    sampler = mis if mis is not None else default_mis(params0.config)
    return _adaptive_train(params0, data, attack, sampler, attention_term=False, **kw)


def run_badnets_rep_baseline(params0, data, attack: AttackConfig, pattern: torch.Tensor,
                             location, **kw) -> TrainResult:
    """Patch-replacement poisoning at a fixed location; the pattern is never optimised
    and no stealth terms are used."""
    low, high = float(pattern.min()), float(pattern.max())
    trig = Trigger(pattern.detach().clone(), low, high, None)
    return run_fixed_pattern(params0, data, attack, trig, FixedLocation(PatchIndex(*location)),
                             insertion="rep", **kw)


def run_fixed_pattern(params0, data, attack: AttackConfig, trigger: Trigger, sampler,
                      insertion: str = "sup", **kw) -> TrainResult:
    """Poison with a given, never-optimised pattern drawn at locations from ``sampler``.

    Used for the location and magnitude observations: only the model phase runs.
    """
    plain = replace(attack, weights=LossWeights(0.0, 0.0, attack.weights.reading), trigger_epochs=0)
    return _adaptive_train(params0, data, plain, sampler, optimize_trigger=False,
                           attention_term=False, insertion=insertion, trigger=trigger, **kw)


def run_single_level_ablation(params0, data, attack: AttackConfig, mis: MISConfig | None = None,
                              progress=None) -> TrainResult:
    """Joint optimisation of model and trigger on the aggregated objective.

    Runs ``epochs * model_epochs`` passes; the trigger uses SGD and is clamped
    after each step, the model uses AdamW.
    """
    model = copy.deepcopy(params0)
    model.train()
    cfg = model.config
    sampler = mis if mis is not None else default_mis(cfg)
    seed = attack.seed
    low, high = data.value_range()
    trig = Trigger.initialize(cfg, low, high, derive_seed(seed, "trigger-init"),
                              attack.trigger_init_scale)
    t_param = torch.nn.Parameter(trig.values.clone())
    clean_idx, bd_idx, trig_idx = poison_partition(len(data), attack.poison_ratio,
                                                   attack.trigger_fraction, seed)
    is_bd = np.zeros(len(data), dtype=bool)
    is_bd[bd_idx] = True
    opt_t = torch.optim.SGD([t_param], lr=attack.lr_trigger)
    opt_m = torch.optim.AdamW(model.parameters(), lr=attack.lr_model, betas=attack.betas,
                              eps=attack.eps, weight_decay=attack.weight_decay)
    loc_rng = np.random.default_rng(derive_seed(seed, "locations"))
    order_rng = np.random.default_rng(derive_seed(seed, "order"))
    result = TrainResult(model, trig, partition=(clean_idx, bd_idx, trig_idx))
    start = time.perf_counter()
    for epoch in range(attack.epochs * max(attack.model_epochs, 1)):
        rows = []
        for idx in iterate_batches(len(data), attack.batch_size, order_rng):
            bd = is_bd[idx]
            ci, pi = torch.from_numpy(idx[~bd]), torch.from_numpy(idx[bd])
            rep = single_level_objective(model, data.images[ci], data.labels[ci], data.images[pi],
                                         t_param, attack.weights, sampler, attack.target,
                                         attack.layer, loc_rng,
                                         class_row_only=attack.class_row_only)
            _finite(rep.aggregate, f"joint epoch {epoch}")
            opt_t.zero_grad()
            opt_m.zero_grad()
            rep.aggregate.backward()
            opt_t.step()
            opt_m.step()
            with torch.no_grad():
                t_param.clamp_(*inward_bounds(low, high, t_param.dtype))
            rows.append(rep.row())
            result.locations.extend(rep.locations.tolist())
        result.log.append({"epoch": epoch, "phase": "joint", "pass": 0, **_mean_rows(rows),
                           "seed": seed})
        if progress:
            progress(f"joint epoch {epoch + 1} L_bd {result.log[-1]['L_bd']:.4f}")
    result.phase_seconds = {"joint": time.perf_counter() - start}
    model.eval()
    result.trigger = clamp_trigger(Trigger(t_param.detach().clone(), low, high, trig.seed))
    return result


def write_loss_log(rows: list[dict], path) -> Path:
    """CSV with one row per phase pass."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path
