"""Defenses evaluated against patch-wise backdoors.

Patch operations (drop, shuffle and their composition), flip-count detection,
attention-guided blocking, STRIP entropy, MLP fine-pruning and Gaussian
smoothing.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageSet
from .evaluation import PayloadSpec, accuracy, asr, eligible, poison_with_payload
from .seeding import derive_seed
from .vit import VisionTransformer, attention_rollout, predict


@dataclass
class DetectionReport:
    fnr: float
    tpr: float
    drop_threshold: float
    shuffle_threshold: float
    calib_counts: dict = field(default_factory=dict, repr=False)
    clean_counts: dict = field(default_factory=dict, repr=False)
    poison_counts: dict = field(default_factory=dict, repr=False)


@dataclass
class DefenseOutcome:
    defense: str
    payload: str
    acc_before: float
    asr_before: float
    acc_after: float
    asr_after: float
    params: dict = field(default_factory=dict)


def _batched(x):
    return (x[None], True) if x.dim() == 3 else (x, False)


def _grid(x, patch_size):
    H = x.shape[-1]
    if H % patch_size:
        raise ValueError(f"patch size {patch_size} does not divide image size {H}")
    return H // patch_size


def _patch_slice(flat, g, p):
    r, c = divmod(int(flat), g)
    return slice(r * p, (r + 1) * p), slice(c * p, (c + 1) * p)


def drop_patches(x, patches, patch_size: int, fill: float):
    """Set patch ``patches[b]`` of every image ``b`` to ``fill``."""
    xb, single = _batched(x)
    g = _grid(xb, patch_size)
    out = xb.clone()
    for b, flat in enumerate(np.atleast_1d(patches)):
        rs, cs = _patch_slice(flat, g, patch_size)
        out[b, :, rs, cs] = fill
    return out[0] if single else out


def swap_patches(x, pairs, patch_size: int):
    """Swap the patch pair ``pairs[b]`` of every image ``b``."""
    xb, single = _batched(x)
    g = _grid(xb, patch_size)
    out = xb.clone()
    for b, (i, j) in enumerate(np.atleast_2d(pairs)):
        ri, ci = _patch_slice(i, g, patch_size)
        rj, cj = _patch_slice(j, g, patch_size)
        out[b, :, ri, ci] = xb[b, :, rj, cj]
        out[b, :, rj, cj] = xb[b, :, ri, ci]
    return out[0] if single else out


def draw_drop(rng: np.random.Generator, batch: int, n: int) -> np.ndarray:
    return rng.integers(n, size=batch)


def draw_pairs(rng: np.random.Generator, batch: int, n: int) -> np.ndarray:
    """Uniform unordered pairs of distinct patches, returned as ``(i, j)`` with ``i < j``."""
    if n < 2:
        raise ValueError("patch shuffle needs at least two patches")
    i = rng.integers(n, size=batch)
    j = rng.integers(n - 1, size=batch)
    j = j + (j >= i)
    return np.sort(np.stack([i, j], axis=1), axis=1)


def patch_drop(x, rng: np.random.Generator, patch_size: int, fill: float):
    """Blank one uniformly chosen patch per image."""
    xb, single = _batched(x)
    g = _grid(xb, patch_size)
    out = drop_patches(xb, draw_drop(rng, xb.shape[0], g * g), patch_size, fill)
    return out[0] if single else out


def patch_shuffle(x, rng: np.random.Generator, patch_size: int):
    """Swap one uniformly chosen unordered patch pair per image."""
    xb, single = _batched(x)
    g = _grid(xb, patch_size)
    out = swap_patches(xb, draw_pairs(rng, xb.shape[0], g * g), patch_size)
    return out[0] if single else out


def drop_and_shuffle(x, rng: np.random.Generator, patch_size: int, fill: float):
    """Shuffle first, then drop on the shuffled image."""
    return patch_drop(patch_shuffle(x, rng, patch_size), rng, patch_size, fill)


PATCH_OPS = {
    "drop": lambda x, rng, p, fill: patch_drop(x, rng, p, fill),
    "shuffle": lambda x, rng, p, fill: patch_shuffle(x, rng, p),
    "drop_shuffle": lambda x, rng, p, fill: drop_and_shuffle(x, rng, p, fill),
}


def _fill_value(data: ImageSet) -> float:
    return data.value_range()[0]


def _op_rates(model, x, labels, op, repetitions, rng, p, fill, target=None):
    hits = np.zeros(repetitions)
    for r in range(repetitions):
        preds = predict(model, op(x, rng, p, fill))
        ref = labels if target is None else torch.full_like(preds, int(target))
        hits[r] = float((preds == ref).float().mean())
    return hits


def patch_op_evaluation(model: VisionTransformer, t, clean_set: ImageSet, payloads, y_tgt: int,
                        repetitions: int = 100, ops=None, seed: int = 0, insertion: str = "sup"):
    """ACC/ASR under each patch operation, averaged over ``repetitions`` perturbed copies.

    Returns ``(outcomes, per_repetition)`` where ``per_repetition`` maps
    ``(op, payload_label)`` to the per-repetition ``(acc, asr)`` arrays.
    """
    ops = ops if ops is not None else PATCH_OPS
    p = model.config.patch_size
    fill = _fill_value(clean_set)
    ev = eligible(clean_set, y_tgt)
    acc_before = accuracy(model, clean_set)
    outcomes, logs = [], {}
    for name, op in ops.items():
        rng = np.random.default_rng(derive_seed(seed, "patch-op", name, "clean"))
        acc_reps = _op_rates(model, clean_set.images, clean_set.labels, op, repetitions, rng, p, fill)
        for payload in payloads:
            xp = poison_with_payload(ev, ev.images, t, payload,
                                     np.random.default_rng(payload.seed), insertion=insertion)
            rng = np.random.default_rng(derive_seed(seed, "patch-op", name, payload.label()))
            asr_reps = _op_rates(model, xp, None, op, repetitions, rng, p, fill, target=y_tgt)
            logs[(name, payload.label())] = (acc_reps, asr_reps)
            outcomes.append(DefenseOutcome(
                name, payload.label(), acc_before, asr(model, t, clean_set, payload, y_tgt, insertion=insertion),
                float(acc_reps.mean()), float(asr_reps.mean()), {"repetitions": repetitions}))
    return outcomes, logs


def flip_counts(model: VisionTransformer, images: torch.Tensor, repetitions: int, patch_size: int,
                fill: float, seed: int) -> dict:
    """Per-sample number of predictions that differ from the unperturbed prediction
    under ``repetitions`` independent drops and shuffles."""
    base = predict(model, images)
    drop = np.zeros(len(images), dtype=np.int64)
    shuf = np.zeros(len(images), dtype=np.int64)
    rng_d = np.random.default_rng(derive_seed(seed, "dbavt", "drop"))
    rng_s = np.random.default_rng(derive_seed(seed, "dbavt", "shuffle"))
    for _ in range(repetitions):
        drop += (predict(model, patch_drop(images, rng_d, patch_size, fill)) != base).numpy()
        shuf += (predict(model, patch_shuffle(images, rng_s, patch_size)) != base).numpy()
    return {"drop": drop, "shuffle": shuf}


def dbavt_detect(model: VisionTransformer, calib_clean: ImageSet, test_clean: torch.Tensor,
                 test_poisoned: torch.Tensor, repetitions: int = 100, seed: int = 0,
                 drop_pct: float = 90.0, shuffle_pct: float = 10.0) -> DetectionReport:
    """Flag samples whose drop-flip count exceeds the calibration 90th percentile
    or whose shuffle-flip count falls below the calibration 10th percentile."""
    if len(calib_clean) == 0:
        raise ValueError("calibration set is empty")
    p = model.config.patch_size
    fill = _fill_value(calib_clean)
    cal = flip_counts(model, calib_clean.images, repetitions, p, fill, derive_seed(seed, "calib"))
    t_drop = float(np.percentile(cal["drop"], drop_pct))
    t_shuf = float(np.percentile(cal["shuffle"], shuffle_pct))

    def flagged(counts):
        return (counts["drop"] > t_drop) | (counts["shuffle"] < t_shuf)

    clean = flip_counts(model, test_clean, repetitions, p, fill, derive_seed(seed, "clean"))
    poison = flip_counts(model, test_poisoned, repetitions, p, fill, derive_seed(seed, "poison"))
    fnr = float(flagged(clean).mean()) if len(test_clean) else 0.0
    tpr = float(flagged(poison).mean()) if len(test_poisoned) else 0.0
    return DetectionReport(fnr, tpr, t_drop, t_shuf, cal, clean, poison)


def bavt_block(model: VisionTransformer, x: torch.Tensor, fill: float) -> torch.Tensor:
    """Blank the patch with the highest attention-rollout value (first index on ties)."""
    xb, single = _batched(x)
    with torch.no_grad():
        _, attns = model(xb)
        roll = attention_rollout(attns)
    top = roll.flatten(1).argmax(dim=1).numpy()
    out = drop_patches(xb, top, model.config.patch_size, fill)
    return out[0] if single else out


def bavt_evaluation(model, t, clean_set: ImageSet, payloads, y_tgt: int, batch_size: int = 128,
                    insertion: str = "sup"):
    fill = _fill_value(clean_set)
    ev = eligible(clean_set, y_tgt)
    blocked_clean = torch.cat([bavt_block(model, clean_set.images[s:s + batch_size], fill)
                               for s in range(0, len(clean_set), batch_size)])
    acc_after = float((predict(model, blocked_clean) == clean_set.labels).float().mean())
    acc_before = accuracy(model, clean_set)
    rows = []
    for payload in payloads:
        xp = poison_with_payload(ev, ev.images, t, payload, np.random.default_rng(payload.seed),
                                 insertion=insertion)
        blocked = torch.cat([bavt_block(model, xp[s:s + batch_size], fill)
                             for s in range(0, len(xp), batch_size)])
        asr_after = float((predict(model, blocked) == int(y_tgt)).float().mean())
        rows.append(DefenseOutcome("bavt", payload.label(), acc_before,
                                   asr(model, t, clean_set, payload, y_tgt, insertion=insertion), acc_after, asr_after))
    return rows


def gaussian_sigma(window: int) -> float:
    return 0.3 * ((window - 1) * 0.5 - 1) + 0.8


def gaussian_kernel(window: int) -> torch.Tensor:
    """Normalised ``window x window`` kernel (outer product of 1-D kernels)."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"Gaussian window must be odd, got {window}")
    sigma = gaussian_sigma(window)
    x = torch.arange(window, dtype=torch.float64) - (window - 1) / 2
    k1 = torch.exp(-(x**2) / (2 * sigma**2))
    k1 = k1 / k1.sum()
    return torch.outer(k1, k1)


def gaussian_filter(x: torch.Tensor, window: int) -> torch.Tensor:
    """Per-channel Gaussian smoothing with reflect padding."""
    xb, single = _batched(x)
    k = gaussian_kernel(window).to(xb.dtype)
    C = xb.shape[1]
    pad = window // 2
    padded = F.pad(xb, (pad, pad, pad, pad), mode="reflect") if pad else xb
    out = F.conv2d(padded, k.expand(C, 1, window, window), groups=C)
    return out[0] if single else out


def filter_evaluation(model, t, clean_set: ImageSet, payloads, y_tgt: int, windows=(3, 5),
                      insertion: str = "sup"):
    rows = []
    ev = eligible(clean_set, y_tgt)
    acc_before = accuracy(model, clean_set)
    for window in windows:
        acc_after = float((predict(model, gaussian_filter(clean_set.images, window))
                           == clean_set.labels).float().mean())
        for payload in payloads:
            xp = poison_with_payload(ev, ev.images, t, payload, np.random.default_rng(payload.seed),
                                     insertion=insertion)
            asr_after = float((predict(model, gaussian_filter(xp, window)) == int(y_tgt))
                              .float().mean())
            rows.append(DefenseOutcome("gaussian", payload.label(), acc_before,
                                       asr(model, t, clean_set, payload, y_tgt, insertion=insertion), acc_after,
                                       asr_after, {"window": window,
                                                   "sigma": gaussian_sigma(window)}))
    return rows


def entropy(logits: torch.Tensor) -> torch.Tensor:
    logp = torch.log_softmax(logits, dim=-1)
    return -(logp.exp() * logp).sum(dim=-1)


def strip_entropy(model: VisionTransformer, x: torch.Tensor, clean_pool: ImageSet,
                  blends: int = 100, rng: np.random.Generator | None = None,
                  return_logits: bool = False):
    """Prediction entropy of ``x`` averaged pixelwise with random clean images."""
    if len(clean_pool) == 0:
        raise ValueError("STRIP needs a non-empty clean pool")
    rng = rng if rng is not None else np.random.default_rng(0)
    picks = torch.from_numpy(rng.integers(len(clean_pool), size=blends))
    mixed = 0.5 * (x[None] + clean_pool.images[picks])
    with torch.no_grad():
        logits, _ = model(mixed, keep_attention=False)
    ent = entropy(logits).numpy()
    return (ent, logits.numpy()) if return_logits else ent


def strip_histogram(clean_entropy, poison_entropy, path, bins: int = 30) -> Path:
    """CSV of shared bin edges with clean and poisoned counts."""
    allv = np.concatenate([np.ravel(clean_entropy), np.ravel(poison_entropy)])
    edges = np.histogram_bin_edges(allv, bins=bins)
    hc, _ = np.histogram(clean_entropy, bins=edges)
    hp, _ = np.histogram(poison_entropy, bins=edges)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "clean", "poisoned"])
        for k in range(len(hc)):
            w.writerow([f"{edges[k]:.6f}", f"{edges[k + 1]:.6f}", int(hc[k]), int(hp[k])])
    return path


def mlp_activation(model: VisionTransformer, images: torch.Tensor, batch_size: int = 128) -> torch.Tensor:
    """Mean absolute activation of each hidden unit in the last block's MLP."""
    fc1 = model.blocks[-1].mlp.act
    acc = []

    def hook(_m, _inp, out):
        acc.append(out.abs().sum(dim=(0, 1)).double())

    handle = fc1.register_forward_hook(hook)
    try:
        with torch.no_grad():
            for s in range(0, len(images), batch_size):
                model(images[s:s + batch_size], keep_attention=False)
    finally:
        handle.remove()
    tokens = len(images) * model.config.seq_len
    return torch.stack(acc).sum(dim=0) / tokens


def fine_prune(model: VisionTransformer, calib_clean: ImageSet, ratio: float):
    """Zero the least-active hidden units of the final MLP. Returns ``(model, pruned_units)``."""
    if not 0 <= ratio < 1:
        raise ValueError(f"prune ratio must lie in [0, 1), got {ratio}")
    pruned = copy.deepcopy(model)
    act = mlp_activation(model, calib_clean.images)
    count = int(np.floor(ratio * act.numel()))
    units = torch.argsort(act, stable=True)[:count]
    mlp = pruned.blocks[-1].mlp
    with torch.no_grad():
        mlp.fc1.weight[units] = 0.0
        mlp.fc1.bias[units] = 0.0
        mlp.fc2.weight[:, units] = 0.0
    return pruned, units.numpy()


def fine_prune_sweep(model, t, calib_clean: ImageSet, test_set: ImageSet, payload: PayloadSpec,
                     y_tgt: int, ratios=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
                     insertion: str = "sup"):
    rows = []
    for r in ratios:
        pruned, _ = fine_prune(model, calib_clean, r)
        rows.append({"ratio": r, "acc": accuracy(pruned, test_set),
                     "asr": asr(pruned, t, test_set, payload, y_tgt, insertion=insertion)})
    return rows


def write_outcomes(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["defense", "payload", "params", "acc_before", "asr_before", "acc_after",
                    "asr_after"])
        for r in rows:
            d = asdict(r)
            params = ";".join(f"{k}={v}" for k, v in sorted(d["params"].items()))
            w.writerow([d["defense"], d["payload"], params] +
                       [f"{d[k]:.6f}" for k in ("acc_before", "asr_before", "acc_after", "asr_after")])
    return path
