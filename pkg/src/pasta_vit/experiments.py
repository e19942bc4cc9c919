"""Config-driven pipeline stages shared by the command line and the demo scripts.

Every stage takes an :class:`ExperimentConfig`, writes its artifacts into a run
directory and registers them with the run's :class:`RunManifest`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, to_ini
from .data import ImageSet, load_cifar10, load_image_folder, make_synthetic
from .defenses import (PATCH_OPS, bavt_evaluation, dbavt_detect, filter_evaluation,
                       fine_prune_sweep, patch_op_evaluation, strip_entropy, strip_histogram,
                       write_outcomes)
from .evaluation import (PayloadSpec, TREHeatmap, accuracy, asr, attention_stealth, eligible,
                         emit_heatmap, poison_with_payload, tre_heatmap, visual_stealth)
from .manifest import RunManifest, read_manifest
from .observe import FAMILIES, REP_L2, rep_pattern, rescale_l2, run_observations
from .seeding import derive_seed
from .trainer import (TrainResult, pretrain_clean, run_badnets_rep_baseline, run_no_attn_ablation,
                      run_pasta, run_single_level_ablation, run_single_location_baseline,
                      write_loss_log)
from .trigger import Trigger, load_trigger, save_trigger
from .vit import VisionTransformer, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

CLEAN_MODEL = "clean_model.npz"
BACKDOORED_MODEL = "backdoored_model.npz"
TRIGGER = "trigger.npz"


@dataclass
class Artifacts:
    """A backdoored model plus everything needed to evaluate it."""

    model: VisionTransformer
    trigger: Trigger
    insertion: str = "sup"


def start_run(cfg: ExperimentConfig, command: str, out: str | Path | None = None) -> RunManifest:
    run_dir = Path(out if out is not None else cfg.out)
    return RunManifest(run_dir, command, config_ini=to_ini(cfg), seed=cfg.seed)


def load_data(cfg: ExperimentConfig, manifest: RunManifest | None = None) -> tuple[ImageSet, ImageSet]:
    """Train and test sets for the configured dataset; digests go into the manifest."""
    ds = cfg.dataset
    seed = derive_seed(cfg.seed, "data")
    cfg.check_paths()
    if ds.name == "synthetic":
        train, test = make_synthetic(ds.subset, ds.test_subset, ds.resize, cfg.model.num_classes,
                                     seed=seed)
    elif ds.name == "cifar10":
        train, test = load_cifar10(ds.root, ds.subset, ds.test_subset, seed, ds.mean, ds.std)
    else:
        train, test = load_image_folder(ds.root, ds.classes or None, ds.resize, seed, ds.mean,
                                        ds.std, test_fraction=0.2)
        rng = np.random.default_rng(derive_seed(cfg.seed, "folder-subset"))
        if len(train) > ds.subset:
            train = train.subset(np.sort(rng.choice(len(train), ds.subset, replace=False)))
        if len(test) > ds.test_subset:
            test = test.subset(np.sort(rng.choice(len(test), ds.test_subset, replace=False)))
    if manifest is not None:
        manifest.dataset_digest = {"train": train.digest(), "test": test.digest(),
                                   "train_size": len(train), "test_size": len(test)}
        manifest.classes = list(train.classes)
    return train, test


def eval_subset(cfg: ExperimentConfig, test: ImageSet, size: int) -> ImageSet:
    return test.subset(np.arange(min(size, len(test))))


def pretrain_stage(cfg: ExperimentConfig, train: ImageSet, test: ImageSet, manifest: RunManifest,
                   progress=None) -> VisionTransformer:
    p = cfg.pretrain
    path = manifest.run_dir / CLEAN_MODEL
    with manifest.stage("pretrain"):
        res = pretrain_clean(cfg.model, train, p.epochs, cfg.seed, val=test, lr=p.lr,
                             weight_decay=p.weight_decay, batch_size=p.batch_size,
                             augment=p.augment, checkpoint=path, progress=progress)
    manifest.add_file(path)
    log_path = manifest.run_dir / "pretrain_log.csv"
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(res.losses):
            w.writerow([i, repr(v)])
    manifest.add_file(log_path)
    manifest.results["clean_accuracy"] = res.val_accuracy
    return res.model


def clean_model(cfg, train, test, manifest, model_path=None, progress=None) -> VisionTransformer:
    """Load a clean checkpoint if given, otherwise pretrain one inside this run."""
    if model_path:
        path = Path(model_path)
        if not path.is_file():
            raise FileNotFoundError(f"clean model not found: {path}")
        model = load_checkpoint(path)
        if model.config != cfg.model:
            raise ValueError(f"checkpoint model config {model.config} differs from the config file")
        manifest.results["clean_model"] = str(path)
        manifest.results["clean_accuracy"] = accuracy(model, test)
        return model
    return pretrain_stage(cfg, train, test, manifest, progress)


def badnets_pattern(cfg: ExperimentConfig, train: ImageSet) -> Trigger:
    p = cfg.model.patch_size
    return rep_pattern(train, cfg.model.channels, p, rescale_l2(REP_L2, p),
                       derive_seed(cfg.seed, "badnets-pattern"))


def attack_stage(cfg: ExperimentConfig, model0: VisionTransformer, train: ImageSet,
                 manifest: RunManifest, progress=None, snapshots: bool = True) -> TrainResult:
    a = cfg.attack
    kw = {"progress": progress}
    if snapshots:
        kw["out_dir"] = manifest.run_dir / "epochs"
    with manifest.stage("attack"):
        if a.method == "pasta":
            res = run_pasta(model0, train, a.config, **kw)
        elif a.method == "single":
            res = run_single_location_baseline(model0, train, a.config, a.location, **kw)
        elif a.method == "noattn":
            res = run_no_attn_ablation(model0, train, a.config, **kw)
        elif a.method == "badnets":
            res = run_badnets_rep_baseline(model0, train, a.config,
                                           badnets_pattern(cfg, train).values, a.location, **kw)
        else:
            res = run_single_level_ablation(model0, train, a.config, progress=progress)
    if snapshots and (manifest.run_dir / "epochs").is_dir():
        for f in sorted((manifest.run_dir / "epochs").glob("*.npz")):
            manifest.add_file(f)
    manifest.add_file(save_checkpoint(res.model, manifest.run_dir / BACKDOORED_MODEL,
                                      extra={"method": a.method, "insertion": res.insertion}))
    manifest.add_file(save_trigger(res.trigger, manifest.run_dir / TRIGGER))
    manifest.add_file(write_loss_log(res.log, manifest.run_dir / "loss_log.csv"))
    manifest.results.update({"method": a.method, "insertion": res.insertion,
                             "trigger_l2": res.trigger.norm(),
                             "trigger_l2_display": display_l2(train, res.trigger, res.insertion)})
    for phase, secs in res.phase_seconds.items():
        manifest.stages[f"attack.{phase}"] = secs
    return res


def display_l2(data: ImageSet, t: Trigger, insertion: str = "sup") -> float:
    """l2 norm of the trigger in displayable [0, 1] pixel units.

    Additive triggers scale by the std only; replacement patches are full pixel
    values and are denormalised.
    """
    if insertion == "rep":
        return float(torch.linalg.vector_norm(data.denormalize(t.values)))
    std = torch.tensor(data.std, dtype=t.values.dtype).reshape(-1, 1, 1)
    return float(torch.linalg.vector_norm(t.values * std))


def load_artifacts(run_dir=None, model_path=None, trigger_path=None, insertion=None) -> Artifacts:
    """Backdoored model and trigger from an ``attack`` run directory or explicit paths."""
    base = Path(run_dir) if run_dir else None
    mp = Path(model_path) if model_path else (base / BACKDOORED_MODEL if base else None)
    tp = Path(trigger_path) if trigger_path else (base / TRIGGER if base else None)
    if mp is None or tp is None:
        raise ValueError("pass --run or both --model and --trigger")
    for p in (mp, tp):
        if not p.is_file():
            raise FileNotFoundError(f"missing artifact: {p}")
    model = load_checkpoint(mp)
    trigger, _ = load_trigger(tp)
    if insertion is None:
        insertion = "sup"
        if base is not None and (base / "manifest.json").is_file():
            insertion = read_manifest(base)["results"].get("insertion", "sup")
    return Artifacts(model, trigger, insertion)


# -- evaluation stages -------------------------------------------------------

def tre_stage(cfg, art: Artifacts, test: ImageSet, manifest: RunManifest, payloads=None) -> TREHeatmap:
    sub = eval_subset(cfg, test, cfg.eval.tre_subset)
    y = cfg.attack.config.target
    with manifest.stage("tre"):
        heat = tre_heatmap(art.model, art.trigger, sub, y, insertion=art.insertion)
    for f in emit_heatmap(heat, manifest.run_dir / "tre"):
        manifest.add_file(f)
    full = eval_subset(cfg, test, cfg.eval.eval_subset)
    rows = [("clean", "-", accuracy(art.model, full))]
    for p in payloads or cfg.eval.payload_specs(cfg.seed):
        rows.append(("asr", p.label(), asr(art.model, art.trigger, full, p, y, insertion=art.insertion)))
    path = manifest.run_dir / "attack_metrics.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "payload", "value"])
        w.writerow(["tre", "all patches", f"{heat.tre:.6f}"])
        for metric, label, v in rows:
            w.writerow([metric if metric != "clean" else "acc", label, f"{v:.6f}"])
    manifest.add_file(path)
    manifest.results["tre"] = heat.tre
    manifest.results["acc"] = rows[0][2]
    return heat


def stealth_stage(cfg, art: Artifacts, test: ImageSet, manifest: RunManifest, payloads=None):
    sub = eval_subset(cfg, test, cfg.eval.eval_subset)
    payloads = payloads or cfg.eval.payload_specs(cfg.seed)
    vis_rows, att_rows = [], []
    with manifest.stage("stealth"):
        for p in payloads:
            v = visual_stealth(sub, art.trigger, p, insertion=art.insertion)
            a = attention_stealth(art.model, sub, art.trigger, p, cfg.attack.config.layer,
                                  insertion=art.insertion)
            vis_rows.append((p.label(), v.l2, v.psnr_db, v.ssim))
            att_rows.append((p.label(), a.l2, a.apsnr_db, a.ares))
    for name, header, rows in (("visual_stealth.csv", ["payload", "l2", "psnr_db", "ssim"], vis_rows),
                               ("attention_stealth.csv", ["payload", "l2", "apsnr_db", "ares"], att_rows)):
        path = manifest.run_dir / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for label, *vals in rows:
                w.writerow([label] + [f"{x:.6f}" for x in vals])
        manifest.add_file(path)
    manifest.results["visual_l2"] = vis_rows[0][1]
    manifest.results["attention_l2"] = att_rows[0][1]
    return vis_rows, att_rows


def defend_stage(cfg, art: Artifacts, test: ImageSet, manifest: RunManifest, payloads=None,
                 windows=None):
    d = cfg.defense
    y = cfg.attack.config.target
    payloads = payloads or cfg.eval.payload_specs(cfg.seed)
    calib = test.subset(np.arange(min(d.calib_size, len(test))))
    rest = test.subset(np.arange(len(calib), min(len(calib) + d.test_size, len(test))))
    if len(rest) == 0:
        raise ValueError("test split too small for a disjoint calibration set")
    rows = []
    with manifest.stage("defend"):
        if "patch-ops" in d.methods:
            out, _ = patch_op_evaluation_rows(art, rest, payloads, y, d.repetitions, cfg.seed)
            rows.extend(out)
        if "bavt" in d.methods:
            rows.extend(bavt_evaluation(art.model, art.trigger, rest, payloads, y,
                                        insertion=art.insertion))
        if "gaussian" in d.methods:
            rows.extend(filter_evaluation(art.model, art.trigger, rest, payloads, y,
                                          windows or d.windows, insertion=art.insertion))
        det = None
        if "dbavt" in d.methods:
            det = dbavt_rows(cfg, art, calib, rest, payloads, y, manifest)
    manifest.add_file(write_outcomes(rows, manifest.run_dir / "defense_outcomes.csv"))
    return rows, det


def patch_op_evaluation_rows(art, data, payloads, y, repetitions, seed):
    return patch_op_evaluation(art.model, art.trigger, data, payloads, y, repetitions,
                               PATCH_OPS, seed, insertion=art.insertion)


def dbavt_rows(cfg, art, calib, rest, payloads, y, manifest):
    ev = eligible(rest, y)
    reports = []
    for p in payloads:
        xp = poison_with_payload(ev, ev.images, art.trigger, p, np.random.default_rng(p.seed),
                                 insertion=art.insertion)
        rep = dbavt_detect(art.model, calib, rest.images, xp, cfg.defense.repetitions,
                           derive_seed(cfg.seed, "dbavt"))
        reports.append((p.label(), rep))
    path = manifest.run_dir / "dbavt.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["payload", "fnr", "tpr", "threshold_drop", "threshold_shuffle"])
        for label, r in reports:
            w.writerow([label, f"{r.fnr:.6f}", f"{r.tpr:.6f}", r.drop_threshold, r.shuffle_threshold])
    manifest.add_file(path)
    return reports


def strip_stage(cfg, art: Artifacts, test: ImageSet, manifest: RunManifest, payload=None):
    d = cfg.defense
    y = cfg.attack.config.target
    payload = payload or PayloadSpec("random", 1, (), cfg.seed)
    pool = test.subset(np.arange(min(d.calib_size, len(test))))
    rest = test.subset(np.arange(len(pool), min(len(pool) + d.strip_samples, len(test))))
    ev = eligible(rest, y)
    xp = poison_with_payload(ev, ev.images, art.trigger, payload, np.random.default_rng(payload.seed),
                             insertion=art.insertion)
    rng = np.random.default_rng(derive_seed(cfg.seed, "strip"))
    with manifest.stage("strip"):
        clean_e = np.concatenate([strip_entropy(art.model, x, pool, d.strip_blends, rng)
                                  for x in rest.images])
        poison_e = np.concatenate([strip_entropy(art.model, x, pool, d.strip_blends, rng)
                                   for x in xp])
    manifest.add_file(strip_histogram(clean_e, poison_e, manifest.run_dir / "strip_histogram.csv"))
    manifest.results["strip_mean_entropy"] = {"clean": float(clean_e.mean()),
                                              "poisoned": float(poison_e.mean())}
    return clean_e, poison_e


def prune_stage(cfg, art: Artifacts, test: ImageSet, manifest: RunManifest, payload=None):
    d = cfg.defense
    payload = payload or PayloadSpec("random", 1, (), cfg.seed)
    calib = test.subset(np.arange(min(d.calib_size, len(test))))
    rest = test.subset(np.arange(len(calib), min(len(calib) + d.test_size, len(test))))
    with manifest.stage("prune"):
        rows = fine_prune_sweep(art.model, art.trigger, calib, rest, payload,
                                cfg.attack.config.target, d.prune_ratios, insertion=art.insertion)
    path = manifest.run_dir / "prune_curve.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ratio", "acc", "asr"])
        for r in rows:
            w.writerow([f"{r['ratio']:.6f}", f"{r['acc']:.6f}", f"{r['asr']:.6f}"])
    manifest.add_file(path)
    return rows


# -- composite drivers -------------------------------------------------------

ALPHA1_GRID = (0.5, 1.0, 2.0)
ALPHA2_GRID = (0.001, 0.005, 0.05)


def sweep_alpha(cfg: ExperimentConfig, model0: VisionTransformer, train: ImageSet, test: ImageSet,
                manifest: RunManifest, alpha1_grid=ALPHA1_GRID, alpha2_grid=ALPHA2_GRID,
                payload: PayloadSpec | None = None, progress=None):
    """One attack per (alpha1, alpha2) pair, each in its own run directory with its own
    manifest; the parent run holds the four metric grids."""
    payload = payload or PayloadSpec("random", 1, (), cfg.seed)
    sub = eval_subset(cfg, test, cfg.eval.eval_subset)
    grids = {k: np.zeros((len(alpha1_grid), len(alpha2_grid))) for k in ("acc", "asr", "visual_l2",
                                                                         "attention_l2")}
    rows = []
    for i, a1 in enumerate(alpha1_grid):
        for j, a2 in enumerate(alpha2_grid):
            sub_cfg = cfg.with_overrides(alpha1=a1, alpha2=a2)
            name = f"a1_{a1:g}_a2_{a2:g}"
            child = start_run(sub_cfg, "attack", manifest.run_dir / name)
            child.dataset_digest = manifest.dataset_digest
            child.classes = manifest.classes
            res = attack_stage(sub_cfg, model0, train, child, progress, snapshots=False)
            ins = res.insertion
            vals = {
                "acc": accuracy(res.model, sub),
                "asr": asr(res.model, res.trigger, sub, payload, cfg.attack.config.target, insertion=ins),
                "visual_l2": visual_stealth(sub, res.trigger, payload, insertion=ins).l2,
                "attention_l2": attention_stealth(res.model, sub, res.trigger, payload,
                                                  cfg.attack.config.layer, insertion=ins).l2,
            }
            child.results.update(vals)
            child.write()
            for k, v in vals.items():
                grids[k][i, j] = v
            rows.append((a1, a2, vals))
            if progress:
                progress(f"{name}: " + " ".join(f"{k} {v:.4f}" for k, v in vals.items()))
    for k, g in grids.items():
        peak = float(g.max()) if k.endswith("l2") and g.max() > 0 else 1.0
        for f in emit_heatmap(TREHeatmap.from_grid(g), manifest.run_dir / f"sweep_{k}", vmax=peak):
            manifest.add_file(f)
    path = manifest.run_dir / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha1", "alpha2", "acc", "asr", "visual_l2", "attention_l2"])
        for a1, a2, v in rows:
            w.writerow([repr(a1), repr(a2)] + [f"{v[k]:.6f}" for k in grids])
    manifest.add_file(path)
    manifest.results["runs"] = [f"a1_{a1:g}_a2_{a2:g}" for a1, a2, _ in rows]
    return rows, grids


def observe_stage(cfg, model0, train, test, manifest, families=None, l2_scale=1.0, progress=None):
    sub = eval_subset(cfg, test, cfg.eval.tre_subset)
    out = manifest.run_dir / "observe"
    with manifest.stage("observe"):
        res = run_observations(model0, train, sub, cfg.attack.config, out, families or FAMILIES,
                               l2_scale, progress)
    for f in sorted(out.iterdir()):
        manifest.add_file(f)
    manifest.results["observations"] = {f"{r.family}/{r.name}": r.tre for r in res}
    return res
