"""Command line: ``pasta-vit <subcommand> [options]``.

Every subcommand resolves a config (preset, then ``--config`` file, then flag
overrides), writes its outputs into the run directory and finishes by writing
``manifest.json`` there.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

import torch

from . import experiments as ex
from .config import PRESETS, load_config, preset
from .evaluation import PayloadSpec
from .observe import FAMILIES
from .seeding import derive_seed
from .vit import ConfigError

log = logging.getLogger("pasta_vit")

SUBCOMMANDS = ("pretrain", "attack", "eval-tre", "eval-stealth", "defend", "strip", "prune",
               "sweep-alpha", "observe")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _payload(text: str) -> str:
    try:
        PayloadSpec.parse(text)
    except (ValueError, TypeError) as exc:
        raise argparse.ArgumentTypeError(f"bad payload {text!r}: {exc}") from exc
    return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (overrides the preset)")
    common.add_argument("--preset", default="smoke", choices=sorted(PRESETS),
                        help="base configuration (default: smoke)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="run directory")
    common.add_argument("--quiet", action="store_true", help="only log warnings")

    artifacts = argparse.ArgumentParser(add_help=False)
    artifacts.add_argument("--run", help="directory of an 'attack' run")
    artifacts.add_argument("--model", help="backdoored model checkpoint (instead of --run)")
    artifacts.add_argument("--trigger", help="trigger file (instead of --run)")
    artifacts.add_argument("--insertion", choices=("sup", "rep"), help="trigger insertion mode")
    artifacts.add_argument("--payload", action="append", type=_payload,
                           help="payload such as fixed:k=10, random:k=20 or fixed:3,4;0,0 (repeatable)")

    clean = argparse.ArgumentParser(add_help=False)
    clean.add_argument("--clean-model", help="clean checkpoint; pretrained in this run when omitted")

    alphas = argparse.ArgumentParser(add_help=False)
    alphas.add_argument("--alpha1", type=float, help="visual-stealth weight")
    alphas.add_argument("--alpha2", type=float, help="attention-stealth weight")

    parser = argparse.ArgumentParser(prog="pasta-vit",
                                     description="Patch-wise backdoor attacks on Vision Transformers.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    sub.add_parser("pretrain", parents=[common], help="train a clean model")
    p = sub.add_parser("attack", parents=[common, clean, alphas], help="run the attack or a baseline")
    p.add_argument("--method", choices=("pasta", "single", "noattn", "badnets", "single-level"))
    sub.add_parser("eval-tre", parents=[common, artifacts], help="TRE heatmap and ASR table")
    sub.add_parser("eval-stealth", parents=[common, artifacts], help="visual and attention stealth tables")
    p = sub.add_parser("defend", parents=[common, artifacts],
                       help="patch operations, DBAVT, BAVT and Gaussian filtering")
    p.add_argument("--window", type=int, action="append", help="Gaussian window (repeatable)")
    sub.add_parser("strip", parents=[common, artifacts], help="STRIP entropy histogram")
    sub.add_parser("prune", parents=[common, artifacts], help="fine-pruning curve")
    p = sub.add_parser("sweep-alpha", parents=[common, clean, alphas],
                       help="grid of loss weights with four metric heatmaps")
    p.add_argument("--alpha1-grid", type=_floats, default=ex.ALPHA1_GRID)
    p.add_argument("--alpha2-grid", type=_floats, default=ex.ALPHA2_GRID)
    p.add_argument("--payload", type=_payload, help="payload used for the ASR grid")
    p = sub.add_parser("observe", parents=[common, clean],
                       help="location and magnitude observations with TRE heatmaps")
    p.add_argument("--families", default=",".join(FAMILIES),
                   help=f"comma-separated subset of {','.join(FAMILIES)}")
    p.add_argument("--l2-scale", type=float, default=1.0, help="multiplier on every trigger norm")
    return parser


def resolve_config(args):
    cfg = preset(args.preset)
    if args.config:
        cfg = load_config(args.config, base=cfg)
    return cfg.with_overrides(seed=args.seed, out=args.out, alpha1=getattr(args, "alpha1", None),
                              alpha2=getattr(args, "alpha2", None))


def _payloads(args, cfg):
    if getattr(args, "payload", None):
        return [PayloadSpec.parse(p, cfg.seed) for p in args.payload]
    return None


def run(args, argv=()) -> int:
    cfg = resolve_config(args)
    if args.command == "attack" and args.method:
        cfg = replace(cfg, attack=replace(cfg.attack, method=args.method))
    torch.manual_seed(derive_seed(cfg.seed, "torch"))
    manifest = ex.start_run(cfg, " ".join(["pasta-vit", *argv]))
    progress = log.info
    manifest.results["command"] = args.command
    try:
        train, test = ex.load_data(cfg, manifest)
        cmd = args.command
        if cmd == "pretrain":
            ex.pretrain_stage(cfg, train, test, manifest, progress)
        elif cmd == "attack":
            model0 = ex.clean_model(cfg, train, test, manifest, args.clean_model, progress)
            ex.attack_stage(cfg, model0, train, manifest, progress)
        elif cmd == "sweep-alpha":
            model0 = ex.clean_model(cfg, train, test, manifest, args.clean_model, progress)
            payload = PayloadSpec.parse(args.payload, cfg.seed) if args.payload else None
            ex.sweep_alpha(cfg, model0, train, test, manifest, args.alpha1_grid, args.alpha2_grid,
                           payload, progress)
        elif cmd == "observe":
            model0 = ex.clean_model(cfg, train, test, manifest, args.clean_model, progress)
            fams = tuple(f.strip() for f in args.families.split(",") if f.strip())
            ex.observe_stage(cfg, model0, train, test, manifest, fams, args.l2_scale, progress)
        else:
            art = ex.load_artifacts(args.run, args.model, args.trigger, args.insertion)
            payloads = _payloads(args, cfg)
            if cmd == "eval-tre":
                ex.tre_stage(cfg, art, test, manifest, payloads)
            elif cmd == "eval-stealth":
                ex.stealth_stage(cfg, art, test, manifest, payloads)
            elif cmd == "defend":
                ex.defend_stage(cfg, art, test, manifest, payloads, args.window)
            elif cmd == "strip":
                ex.strip_stage(cfg, art, test, manifest, payloads[0] if payloads else None)
            elif cmd == "prune":
                ex.prune_stage(cfg, art, test, manifest, payloads[0] if payloads else None)
    finally:
        path = manifest.write()
        log.info("manifest written to %s", path)
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return run(args, argv)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
