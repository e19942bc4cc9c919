import csv
import json

import pytest

from pasta_vit.cli import main
from pasta_vit.manifest import read_manifest, verify_manifest

TINY_INI = """\
[dataset]
name = synthetic
subset = 60
test_subset = 40
resize = 16

[model]
image_size = 16
patch_size = 4
embed_dim = 16
num_heads = 2
depth = 2
num_classes = 3

[pretrain]
epochs = 1
batch_size = 32

[attack]
epochs = 1
trigger_epochs = 1
model_epochs = 1
poison_ratio = 0.2
trigger_fraction = 0.3
target = 1
batch_size = 32
location = 1,1

[eval]
payloads = fixed:k=1 random:k=2
eval_subset = 20
tre_subset = 10

[defense]
repetitions = 2
calib_size = 10
test_size = 10
strip_blends = 3
strip_samples = 5
prune_ratios = 0.0,0.5
"""


def write_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return str(path)


@pytest.fixture(scope="module")
def attack_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    out = tmp / "attack"
    assert main(["attack", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    return cfg, out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_help_and_unknown_flag(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    with pytest.raises(SystemExit) as e:
        main(["attack", "--no-such-flag"])
    assert e.value.code != 0
    with pytest.raises(SystemExit) as e:
        main(["eval-tre", "--payload", "weird"])
    assert e.value.code != 0


def test_missing_config_and_artifacts(tmp_path):
    assert main(["pretrain", "--config", str(tmp_path / "none.ini"), "--quiet"]) == 1
    cfg = write_config(tmp_path)
    assert main(["eval-tre", "--config", cfg, "--out", str(tmp_path / "e"),
                 "--run", str(tmp_path / "nothing"), "--quiet"]) == 1
    assert main(["eval-tre", "--config", cfg, "--out", str(tmp_path / "e"), "--quiet"]) == 1
    # a manifest is still written for the failed run
    assert (tmp_path / "e" / "manifest.json").is_file()


def test_pretrain(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "pre"
    assert main(["pretrain", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    m = read_manifest(out)
    assert set(m["files"]) == {"clean_model.npz", "pretrain_log.csv"}
    assert 0 <= m["results"]["clean_accuracy"] <= 1
    assert m["dataset_digest"]["train_size"] == 60
    assert verify_manifest(out) == []


def test_attack_outputs(attack_run):
    _, out = attack_run
    m = read_manifest(out)
    for f in ("backdoored_model.npz", "trigger.npz", "loss_log.csv", "clean_model.npz",
              "epochs/model_epoch000.npz", "epochs/trigger_epoch000.npz"):
        assert f in m["files"], f
    assert m["results"]["method"] == "pasta" and m["results"]["insertion"] == "sup"
    assert "attack.trigger" in m["stages_seconds"]
    assert "[attack]" in m["config"]
    rows = read_rows(out / "loss_log.csv")
    assert [r["phase"] for r in rows] == ["trigger", "model"]
    assert verify_manifest(out) == []


def test_attack_rerun_is_bitwise_identical(attack_run, tmp_path):
    cfg, first = attack_run
    again = tmp_path / "again"
    assert main(["attack", "--config", cfg, "--out", str(again), "--quiet"]) == 0
    assert (first / "loss_log.csv").read_bytes() == (again / "loss_log.csv").read_bytes()
    assert read_manifest(first)["files"] == read_manifest(again)["files"]


def test_seed_changes_outputs(attack_run, tmp_path):
    cfg, first = attack_run
    other = tmp_path / "other"
    assert main(["attack", "--config", cfg, "--out", str(other), "--seed", "1", "--quiet"]) == 0
    assert read_manifest(first)["files"]["trigger.npz"] != read_manifest(other)["files"]["trigger.npz"]


def test_eval_tre(attack_run, tmp_path):
    cfg, run = attack_run
    out = tmp_path / "tre"
    assert main(["eval-tre", "--config", cfg, "--run", str(run), "--out", str(out), "--quiet"]) == 0
    rows = read_rows(out / "attack_metrics.csv")
    assert [r["payload"] for r in rows] == ["all patches", "-", "Fixed 1 TAL", "Random 2 TALs"]
    grid = list(csv.reader(open(out / "tre.csv")))
    assert len(grid) == 4 and all(len(r) == 4 for r in grid)
    assert set(read_manifest(out)["files"]) == {"tre.csv", "tre.pgm", "attack_metrics.csv"}


def test_eval_stealth_with_payload_flag(attack_run, tmp_path):
    cfg, run = attack_run
    out = tmp_path / "st"
    assert main(["eval-stealth", "--config", cfg, "--run", str(run), "--out", str(out),
                 "--payload", "fixed:0,0", "--payload", "random:k=16", "--quiet"]) == 0
    vis = read_rows(out / "visual_stealth.csv")
    att = read_rows(out / "attention_stealth.csv")
    assert [r["payload"] for r in vis] == ["Fixed 1 TAL", "Random 16 TALs"]
    assert float(vis[1]["l2"]) > float(vis[0]["l2"])
    assert len(att) == 2


def test_defend(attack_run, tmp_path):
    cfg, run = attack_run
    out = tmp_path / "def"
    assert main(["defend", "--config", cfg, "--model", str(run / "backdoored_model.npz"),
                 "--trigger", str(run / "trigger.npz"), "--out", str(out), "--window", "3",
                 "--quiet"]) == 0
    rows = read_rows(out / "defense_outcomes.csv")
    assert {r["defense"] for r in rows} == {"drop", "shuffle", "drop_shuffle", "bavt", "gaussian"}
    assert len([r for r in rows if r["defense"] == "gaussian"]) == 2
    assert len(read_rows(out / "dbavt.csv")) == 2


def test_strip_and_prune(attack_run, tmp_path):
    cfg, run = attack_run
    assert main(["strip", "--config", cfg, "--run", str(run), "--out", str(tmp_path / "s"),
                 "--quiet"]) == 0
    hist = read_rows(tmp_path / "s" / "strip_histogram.csv")
    assert sum(int(r["clean"]) for r in hist) == 5 * 3
    assert main(["prune", "--config", cfg, "--run", str(run), "--out", str(tmp_path / "p"),
                 "--quiet"]) == 0
    assert [float(r["ratio"]) for r in read_rows(tmp_path / "p" / "prune_curve.csv")] == [0.0, 0.5]


@pytest.mark.parametrize("method", ["single", "noattn", "badnets", "single-level"])
def test_attack_methods(attack_run, tmp_path, method):
    cfg, run = attack_run
    out = tmp_path / method
    assert main(["attack", "--config", cfg, "--method", method, "--out", str(out),
                 "--clean-model", str(run / "clean_model.npz"), "--quiet"]) == 0
    m = read_manifest(out)
    assert m["results"]["method"] == method
    assert m["results"]["insertion"] == ("rep" if method == "badnets" else "sup")
    assert "clean_model.npz" not in m["files"]


def test_clean_model_mismatch(attack_run, tmp_path):
    cfg, run = attack_run
    text = open(cfg).read().replace("embed_dim = 16", "embed_dim = 8")
    other = tmp_path / "other.ini"
    other.write_text(text)
    assert main(["attack", "--config", str(other), "--out", str(tmp_path / "x"),
                 "--clean-model", str(run / "clean_model.npz"), "--quiet"]) == 1


def test_sweep_alpha_writes_nine_manifests(attack_run, tmp_path):
    cfg, run = attack_run
    out = tmp_path / "sweep"
    assert main(["sweep-alpha", "--config", cfg, "--out", str(out), "--clean-model",
                 str(run / "clean_model.npz"), "--quiet"]) == 0
    children = sorted(p.parent.name for p in out.glob("*/manifest.json"))
    assert len(children) == 9
    for name in children:
        child = read_manifest(out / name)
        assert {"acc", "asr", "visual_l2", "attention_l2"} <= set(child["results"])
        assert verify_manifest(out / name) == []
    parent = read_manifest(out)
    assert sorted(parent["results"]["runs"]) == children
    for k in ("acc", "asr", "visual_l2", "attention_l2"):
        assert f"sweep_{k}.csv" in parent["files"] and f"sweep_{k}.pgm" in parent["files"]
    assert len(read_rows(out / "sweep.csv")) == 9
    # alpha weights reach the child configs
    assert "alpha1 = 2.0" in read_manifest(out / "a1_2_a2_0.05")["config"]


def test_observe(attack_run, tmp_path):
    cfg, run = attack_run
    out = tmp_path / "obs"
    assert main(["observe", "--config", cfg, "--out", str(out), "--families", "corner_pair",
                 "--clean-model", str(run / "clean_model.npz"), "--quiet"]) == 0
    m = read_manifest(out)
    assert "observe/summary.csv" in m["files"]
    assert list(m["results"]["observations"]) == ["corner_pair/pair_0_3"]
    assert main(["observe", "--config", cfg, "--out", str(out), "--families", "bogus",
                 "--clean-model", str(run / "clean_model.npz"), "--quiet"]) == 1


def test_manifest_is_json(attack_run):
    _, out = attack_run
    d = json.loads((out / "manifest.json").read_text())
    assert d["command"].startswith("pasta-vit attack")
