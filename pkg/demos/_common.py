"""Shared helpers for the demo scripts."""

import csv
import sys
from pathlib import Path

from pasta_vit.cli import main


def out_dir(default: str) -> Path:
    return Path(sys.argv[1] if len(sys.argv) > 1 else default)


def run(*args) -> None:
    print("$ pasta-vit " + " ".join(map(str, args)))
    code = main([str(a) for a in args] + ["--quiet"])
    if code != 0:
        raise SystemExit(f"command failed with exit code {code}")


def show_csv(path) -> None:
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            print("   " + "  ".join(f"{c:>14}" for c in row))
