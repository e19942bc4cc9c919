"""Experiment configuration: an INI file with one section per stage, plus presets.

Layout::

    [run]      seed, out
    [dataset]  name (cifar10 | folder | synthetic), root, subset, test_subset, mean, std, ...
    [model]    ModelConfig fields
    [pretrain] epochs, lr, weight_decay, batch_size, augment
    [attack]   method, location, AttackConfig fields, alpha1, alpha2, reading
    [eval]     payloads (whitespace separated PayloadSpec strings), subsets
    [defense]  methods, repetitions, windows, strip/prune settings

Parsing then serialising then parsing again gives an identical config.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import CIFAR10_MEAN, CIFAR10_STD
from .evaluation import PayloadSpec
from .objectives import LossWeights
from .trainer import AttackConfig
from .vit import ConfigError, ModelConfig

ATTACK_METHODS = ("pasta", "single", "noattn", "badnets", "single-level")
DATASETS = ("cifar10", "folder", "synthetic")
DEFENSES = ("patch-ops", "dbavt", "bavt", "gaussian")
CIFAR_ENV = "PASTA_CIFAR10_ROOT"


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "synthetic"
    root: str = ""
    subset: int = 2000
    test_subset: int = 400
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.25, 0.25, 0.25)
    resize: int = 32
    classes: tuple = ()

    def __post_init__(self):
        if self.name not in DATASETS:
            raise ConfigError(f"dataset name must be one of {DATASETS}, got {self.name!r}")
        if self.subset < 1 or self.test_subset < 1:
            raise ConfigError("dataset subsets must be positive")
        if self.name != "synthetic" and not self.root:
            raise ConfigError(f"dataset {self.name!r} needs a root path")
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        object.__setattr__(self, "classes", tuple(self.classes))


@dataclass(frozen=True)
class PretrainSpec:
    epochs: int = 6
    lr: float = 2e-3
    weight_decay: float = 0.05
    batch_size: int = 64
    augment: bool = False


@dataclass(frozen=True)
class AttackSpec:
    method: str = "pasta"
    location: tuple = (4, 4)
    config: AttackConfig = field(default_factory=AttackConfig)

    def __post_init__(self):
        if self.method not in ATTACK_METHODS:
            raise ConfigError(f"attack method must be one of {ATTACK_METHODS}, got {self.method!r}")
        object.__setattr__(self, "location", tuple(int(v) for v in self.location))
        if len(self.location) != 2:
            raise ConfigError("attack location must be 'row,col'")


@dataclass(frozen=True)
class EvalSpec:
    payloads: tuple = ("fixed:k=1", "random:k=1", "fixed:k=10", "random:k=10", "random:k=20")
    eval_subset: int = 400
    tre_subset: int = 200

    def __post_init__(self):
        for p in self.payloads:
            PayloadSpec.parse(p)
        object.__setattr__(self, "payloads", tuple(self.payloads))

    def payload_specs(self, seed: int) -> list[PayloadSpec]:
        return [PayloadSpec.parse(p, seed) for p in self.payloads]


@dataclass(frozen=True)
class DefenseSpec:
    methods: tuple = DEFENSES
    repetitions: int = 20
    windows: tuple = (3, 5)
    calib_size: int = 200
    test_size: int = 200
    strip_blends: int = 20
    strip_samples: int = 50
    prune_ratios: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 0.95)

    def __post_init__(self):
        bad = [m for m in self.methods if m not in DEFENSES]
        if bad:
            raise ConfigError(f"unknown defense(s) {bad}; choose from {DEFENSES}")
        if any(w % 2 == 0 or w < 1 for w in self.windows):
            raise ConfigError("Gaussian windows must be odd and positive")
        if any(not 0 <= r < 1 for r in self.prune_ratios):
            raise ConfigError("prune ratios must lie in [0, 1)")
        for name in ("methods", "windows", "prune_ratios"):
            object.__setattr__(self, name, tuple(getattr(self, name)))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    defense: DefenseSpec = field(default_factory=DefenseSpec)

    def __post_init__(self):
        if self.attack.config.seed != self.seed:
            object.__setattr__(self, "attack",
                               replace(self.attack, config=replace(self.attack.config, seed=self.seed)))
        if self.model.image_size != self.dataset.resize and self.dataset.name != "cifar10":
            raise ConfigError("model image_size must equal dataset resize")
        if not 0 <= self.attack.config.target < self.model.num_classes:
            raise ConfigError("attack target outside the label range")

    def with_overrides(self, seed=None, out=None, alpha1=None, alpha2=None) -> "ExperimentConfig":
        cfg = self
        w = cfg.attack.config.weights
        if alpha1 is not None or alpha2 is not None:
            w = LossWeights(w.alpha1 if alpha1 is None else alpha1,
                            w.alpha2 if alpha2 is None else alpha2, w.reading)
            cfg = replace(cfg, attack=replace(cfg.attack, config=replace(cfg.attack.config, weights=w)))
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if out is not None:
            cfg = replace(cfg, out=str(out))
        return cfg

    def check_paths(self) -> None:
        """Raise if a referenced input path is missing."""
        if self.dataset.name != "synthetic" and not Path(self.dataset.root).exists():
            raise ConfigError(f"dataset root does not exist: {self.dataset.root}")


# -- INI serialisation --------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def to_ini(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {"seed": _fmt(cfg.seed), "out": cfg.out}
    cp["dataset"] = {k: _fmt(v) for k, v in asdict(cfg.dataset).items()}
    cp["model"] = {k: _fmt(v) for k, v in asdict(cfg.model).items()}
    cp["pretrain"] = {k: _fmt(v) for k, v in asdict(cfg.pretrain).items()}
    a = cfg.attack.config
    attack = {"method": cfg.attack.method, "location": _fmt(cfg.attack.location)}
    for f in fields(AttackConfig):
        if f.name in ("seed", "weights", "betas"):
            continue
        attack[f.name] = _fmt(getattr(a, f.name))
    attack["beta1"], attack["beta2"] = _fmt(float(a.betas[0])), _fmt(float(a.betas[1]))
    attack["alpha1"], attack["alpha2"] = _fmt(float(a.weights.alpha1)), _fmt(float(a.weights.alpha2))
    attack["reading"] = a.weights.reading
    cp["attack"] = attack
    cp["eval"] = {"payloads": " ".join(cfg.eval.payloads),
                  "eval_subset": _fmt(cfg.eval.eval_subset), "tre_subset": _fmt(cfg.eval.tre_subset)}
    cp["defense"] = {k: _fmt(v) for k, v in asdict(cfg.defense).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


_KNOWN = {
    "run": {"seed", "out"},
    "dataset": {f.name for f in fields(DatasetSpec)},
    "model": {f.name for f in fields(ModelConfig)},
    "pretrain": {f.name for f in fields(PretrainSpec)},
    "attack": ({f.name for f in fields(AttackConfig)} - {"seed", "weights", "betas"})
    | {"method", "location", "beta1", "beta2", "alpha1", "alpha2", "reading"},
    "eval": {f.name for f in fields(EvalSpec)},
    "defense": {f.name for f in fields(DefenseSpec)},
}


def from_ini(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse INI text; keys not given fall back to ``base`` (default: the smoke preset)."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for section in cp.sections():
        if section not in _KNOWN:
            raise ConfigError(f"unknown config section [{section}]")
        extra = set(cp[section]) - _KNOWN[section]
        if extra:
            raise ConfigError(f"unknown key(s) {sorted(extra)} in [{section}]")
    base = base if base is not None else preset("smoke")
    sec = {s: dict(cp[s]) if cp.has_section(s) else {} for s in _KNOWN}
    try:
        return _build(sec, base)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {exc}") from exc


def _build(sec: dict, base: ExperimentConfig) -> ExperimentConfig:
    run = sec["run"]
    d = sec["dataset"]
    b = base.dataset
    dataset = DatasetSpec(
        name=d.get("name", b.name), root=d.get("root", b.root),
        subset=int(d.get("subset", b.subset)), test_subset=int(d.get("test_subset", b.test_subset)),
        mean=_floats(d["mean"]) if "mean" in d else b.mean,
        std=_floats(d["std"]) if "std" in d else b.std,
        resize=int(d.get("resize", b.resize)),
        classes=tuple(c.strip() for c in d["classes"].split(",") if c.strip()) if "classes" in d else b.classes,
    )
    m = sec["model"]
    mb = base.model
    model = ModelConfig(
        image_size=int(m.get("image_size", mb.image_size)), channels=int(m.get("channels", mb.channels)),
        patch_size=int(m.get("patch_size", mb.patch_size)), embed_dim=int(m.get("embed_dim", mb.embed_dim)),
        num_heads=int(m.get("num_heads", mb.num_heads)), depth=int(m.get("depth", mb.depth)),
        mlp_ratio=float(m.get("mlp_ratio", mb.mlp_ratio)),
        num_classes=int(m.get("num_classes", mb.num_classes)),
        use_pos_embed=_bool(m["use_pos_embed"]) if "use_pos_embed" in m else mb.use_pos_embed,
    )
    p = sec["pretrain"]
    pb = base.pretrain
    pretrain = PretrainSpec(
        epochs=int(p.get("epochs", pb.epochs)), lr=float(p.get("lr", pb.lr)),
        weight_decay=float(p.get("weight_decay", pb.weight_decay)),
        batch_size=int(p.get("batch_size", pb.batch_size)),
        augment=_bool(p["augment"]) if "augment" in p else pb.augment,
    )
    a = sec["attack"]
    ab = base.attack.config
    layer = a.get("layer", _fmt(ab.layer)).strip().lower()
    weights = LossWeights(float(a.get("alpha1", ab.weights.alpha1)),
                          float(a.get("alpha2", ab.weights.alpha2)),
                          a.get("reading", ab.weights.reading))
    attack_cfg = AttackConfig(
        epochs=int(a.get("epochs", ab.epochs)),
        trigger_epochs=int(a.get("trigger_epochs", ab.trigger_epochs)),
        model_epochs=int(a.get("model_epochs", ab.model_epochs)),
        lr_trigger=float(a.get("lr_trigger", ab.lr_trigger)),
        lr_model=float(a.get("lr_model", ab.lr_model)),
        betas=(float(a.get("beta1", ab.betas[0])), float(a.get("beta2", ab.betas[1]))),
        eps=float(a.get("eps", ab.eps)),
        weight_decay=float(a.get("weight_decay", ab.weight_decay)),
        poison_ratio=float(a.get("poison_ratio", ab.poison_ratio)),
        trigger_fraction=float(a.get("trigger_fraction", ab.trigger_fraction)),
        target=int(a.get("target", ab.target)),
        batch_size=int(a.get("batch_size", ab.batch_size)),
        weights=weights,
        layer=None if layer in ("none", "") else int(layer),
        class_row_only=_bool(a["class_row_only"]) if "class_row_only" in a else ab.class_row_only,
        trigger_init_scale=float(a.get("trigger_init_scale", ab.trigger_init_scale)),
    )
    attack = AttackSpec(a.get("method", base.attack.method),
                        _ints(a["location"]) if "location" in a else base.attack.location, attack_cfg)
    e = sec["eval"]
    eb = base.eval
    ev = EvalSpec(payloads=tuple(e["payloads"].split()) if "payloads" in e else eb.payloads,
                  eval_subset=int(e.get("eval_subset", eb.eval_subset)),
                  tre_subset=int(e.get("tre_subset", eb.tre_subset)))
    f = sec["defense"]
    fb = base.defense
    defense = DefenseSpec(
        methods=tuple(x.strip() for x in f["methods"].split(",") if x.strip()) if "methods" in f else fb.methods,
        repetitions=int(f.get("repetitions", fb.repetitions)),
        windows=_ints(f["windows"]) if "windows" in f else fb.windows,
        calib_size=int(f.get("calib_size", fb.calib_size)),
        test_size=int(f.get("test_size", fb.test_size)),
        strip_blends=int(f.get("strip_blends", fb.strip_blends)),
        strip_samples=int(f.get("strip_samples", fb.strip_samples)),
        prune_ratios=_floats(f["prune_ratios"]) if "prune_ratios" in f else fb.prune_ratios,
    )
    return ExperimentConfig(seed=int(run.get("seed", base.seed)), out=run.get("out", base.out),
                            dataset=dataset, model=model, pretrain=pretrain, attack=attack,
                            eval=ev, defense=defense)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return from_ini(path.read_text(), base)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_ini(cfg))
    return path


# -- presets -------------------------------------------------------------------

def _smoke() -> ExperimentConfig:
    """Synthetic gratings, 3-block ViT; an attack run takes about a minute on one core."""
    attack = AttackConfig(epochs=5, trigger_epochs=2, model_epochs=3, lr_model=1e-3,
                          poison_ratio=0.1, trigger_fraction=0.1, trigger_init_scale=1.0,
                          weights=LossWeights(0.1, 0.005))
    return ExperimentConfig(
        out="runs/smoke",
        dataset=DatasetSpec("synthetic", subset=2000, test_subset=400),
        model=ModelConfig(image_size=32, patch_size=4, embed_dim=32, num_heads=4, depth=3),
        pretrain=PretrainSpec(epochs=6, lr=2e-3, batch_size=64, augment=False),
        attack=AttackSpec("pasta", (4, 4), attack),
        eval=EvalSpec(eval_subset=400, tre_subset=200),
        defense=DefenseSpec(repetitions=10, calib_size=150, test_size=150, strip_blends=10,
                            strip_samples=40),
    )


def _desk() -> ExperimentConfig:
    """CIFAR-10 10k/2k subset with the toy ViT (depth 6, dim 128, patch 4)."""
    attack = AttackConfig(epochs=10, trigger_epochs=3, model_epochs=5, lr_model=5e-4,
                          poison_ratio=0.1, trigger_fraction=0.05, trigger_init_scale=0.5,
                          weights=LossWeights(0.1, 0.005), batch_size=128)
    return ExperimentConfig(
        out="runs/desk",
        dataset=DatasetSpec("cifar10", root=os.environ.get(CIFAR_ENV, "data/cifar-10-batches-bin"),
                            subset=10000, test_subset=2000, mean=CIFAR10_MEAN, std=CIFAR10_STD),
        model=ModelConfig(image_size=32, patch_size=4, embed_dim=128, num_heads=4, depth=6),
        pretrain=PretrainSpec(epochs=30, lr=1e-3, batch_size=128, augment=True),
        attack=AttackSpec("pasta", (4, 4), attack),
        eval=EvalSpec(eval_subset=2000, tre_subset=500),
        defense=DefenseSpec(repetitions=100, calib_size=500, test_size=500, strip_blends=100,
                            strip_samples=200),
    )


PRESETS = {"smoke": _smoke, "desk": _desk}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()
