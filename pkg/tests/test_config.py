import pytest

from pasta_vit.config import (CIFAR_ENV, PRESETS, DatasetSpec, DefenseSpec, EvalSpec,
                              ExperimentConfig, from_ini, load_config, preset, save_config, to_ini)
from pasta_vit.objectives import LossWeights
from pasta_vit.vit import ConfigError


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_round_trip(name):
    cfg = preset(name)
    again = from_ini(to_ini(cfg))
    assert again == cfg
    assert to_ini(again) == to_ini(cfg)


def test_partial_file_falls_back_to_base():
    cfg = from_ini("[attack]\nalpha1 = 0.7\n[run]\nseed = 9\n")
    base = preset("smoke")
    assert cfg.attack.config.weights == LossWeights(0.7, base.attack.config.weights.alpha2)
    assert cfg.seed == 9 and cfg.attack.config.seed == 9
    assert cfg.model == base.model


def test_layer_none_and_int():
    assert from_ini("[attack]\nlayer = none\n").attack.config.layer is None
    assert from_ini("[attack]\nlayer = 2\n").attack.config.layer == 2


@pytest.mark.parametrize("text", [
    "[nonsense]\na = 1\n",
    "[attack]\nalpha3 = 1\n",
    "[model]\ndepth = many\n",
    "[attack]\nmethod = other\n",
    "[pretrain]\naugment = maybe\n",
    "not an ini file",
    "[defense]\nwindows = 4\n",
    "[defense]\nprune_ratios = 1.0\n",
    "[attack]\ntarget = 10\n",
    "[model]\nimage_size = 16\n",
    "[eval]\npayloads = fixed:k=0\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        from_ini(text)


def test_dataset_needs_root():
    with pytest.raises(ConfigError):
        DatasetSpec("cifar10", root="")
    with pytest.raises(ConfigError):
        DatasetSpec("imagenet")


def test_overrides():
    cfg = preset("smoke").with_overrides(seed=3, out="x", alpha1=0.2)
    assert cfg.seed == 3 and cfg.out == "x" and cfg.attack.config.seed == 3
    assert cfg.attack.config.weights.alpha1 == 0.2
    assert cfg.attack.config.weights.alpha2 == preset("smoke").attack.config.weights.alpha2


def test_save_load(tmp_path):
    cfg = preset("smoke").with_overrides(seed=5)
    path = save_config(cfg, tmp_path / "sub" / "c.ini")
    assert load_config(path) == cfg
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_desk_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(CIFAR_ENV, str(tmp_path))
    cfg = preset("desk")
    assert cfg.dataset.root == str(tmp_path)
    cfg.check_paths()
    monkeypatch.setenv(CIFAR_ENV, str(tmp_path / "missing"))
    with pytest.raises(ConfigError):
        preset("desk").check_paths()


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset("huge")


def test_spec_validation():
    with pytest.raises(ConfigError):
        DefenseSpec(methods=("neural-cleanse",))
    with pytest.raises(ValueError):
        EvalSpec(payloads=("bogus:k=1",))
    assert len(EvalSpec().payload_specs(4)) == 5
    assert all(p.seed == 4 for p in EvalSpec().payload_specs(4))
    assert isinstance(ExperimentConfig(), ExperimentConfig)
