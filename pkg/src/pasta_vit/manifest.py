"""Run manifests: resolved config, dataset digest, code version, timings and file digests."""

from __future__ import annotations

import hashlib
import json
import platform
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = "pasta-manifest-v1"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    h = hashlib.sha256()
    for src in sorted(Path(__file__).parent.glob("*.py")):
        h.update(src.name.encode())
        h.update(src.read_bytes())
    return f"{version}+src.{h.hexdigest()[:12]}"


@dataclass
class RunManifest:
    """One manifest per run directory; every file written by the run is listed with its digest."""

    run_dir: Path
    command: str
    config_ini: str = ""
    seed: int | None = None
    dataset_digest: dict = field(default_factory=dict)
    classes: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)

    def __post_init__(self):
        self.run_dir = Path(self.run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - start

    def add_file(self, path) -> Path:
        path = Path(path)
        rel = path.resolve().relative_to(self.run_dir.resolve()).as_posix()
        if rel == MANIFEST_NAME:
            raise ValueError("the manifest cannot list itself")
        self.files[rel] = file_digest(path)
        return path

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "command": self.command,
            "seed": self.seed,
            "config": self.config_ini,
            "dataset_digest": self.dataset_digest,
            "classes": list(self.classes),
            "code_version": code_version(),
            "python": sys.version.split()[0],
            "platform": platform.platform(),
            "stages_seconds": {k: round(v, 3) for k, v in self.stages.items()},
            "results": self.results,
            "files": dict(sorted(self.files.items())),
        }

    def write(self) -> Path:
        path = self.run_dir / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(v):
    # numpy arrays, numpy scalars and tensors all provide tolist()
    if hasattr(v, "tolist"):
        return v.tolist()
    return str(v)


def read_manifest(run_dir) -> dict:
    path = Path(run_dir)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return json.loads(path.read_text())


def verify_manifest(run_dir) -> list[str]:
    """Return the relative paths whose digest no longer matches (missing files included)."""
    run_dir = Path(run_dir)
    bad = []
    for rel, digest in read_manifest(run_dir)["files"].items():
        p = run_dir / rel
        if not p.is_file() or file_digest(p) != digest:
            bad.append(rel)
    return bad
