import json
import subprocess
import sys

import numpy as np
import pytest

from siftlab import harness, persistence
from siftlab.cli import main
from siftlab.config import RunConfig, parse_config_text
from siftlab.models import make_model

TINY = ["model.hidden=16", "model.layers=1", "model.heads=2", "task.pretrain_size=256",
        "task.finetune_train_size=64", "task.finetune_eval_size=64", "pretrain.steps=40",
        "train.epochs=2", "train.batch_size=16", "analysis.capture_batches=2", "analysis.batch_size=16",
        "scan.alpha_points=5", "scan.beta_points=3", "scan.eval_size=32"]


def run(verb, out, *extra, sets=()):
    argv = [verb, "--out", str(out)]
    for s in list(TINY) + list(sets):
        argv += ["--set", s]
    return main(argv + list(extra))


def _json(path):
    return json.loads(path.read_text())


def test_train_writes_manifest_and_artifacts(tmp_path, capsys):
    assert run("train", tmp_path, sets=["train.rate=0.05"]) == 0
    man = _json(tmp_path / "manifest.json")
    assert man["verb"] == "train" and "numpy" in man["versions"]
    assert set(man["seeds"]) >= {"model.seed", "train.order_seed", "train.mask_seed", "task.seed"}
    for f in ("config.txt", "metrics.csv", "mask.bin", "increment.bin", "memory_report.json", "train.json",
              "theta0.ckpt", "theta1.ckpt"):
        assert (tmp_path / f).exists(), f
    assert json.loads(capsys.readouterr().out)["eval_acc"] >= 0


def test_rerun_from_config_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", a) == 0
    assert main(["train", "--out", str(b), "--config", str(a / "config.txt")]) == 0
    for f in ("metrics.csv", "increment.bin", "mask.bin", "train.json", "theta1.ckpt", "manifest.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_sift_rate_one_matches_full(tmp_path):
    common = ["train.filter=ALL", "train.weight_decay=0.01"]
    assert run("train", tmp_path / "s", sets=common + ["train.method=sift", "train.rate=1.0"]) == 0
    assert run("train", tmp_path / "f", sets=common + ["train.method=full"]) == 0
    s = (tmp_path / "s" / "metrics.csv").read_text().splitlines()
    f = (tmp_path / "f" / "metrics.csv").read_text().splitlines()
    assert s[0] == f[0]
    for ls, lf in zip(s[1:], f[1:]):
        a = np.array([float(x) for x in ls.split(",")])
        b = np.array([float(x) for x in lf.split(",")])
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-12)


def test_memory_ratio_follows_rate(tmp_path):
    # hidden 20: every QKVO tensor has 400 entries, so 5% is exactly 20 per tensor
    assert run("calibrate", tmp_path, sets=["model.hidden=20", "model.heads=4", "train.rate=0.05"]) == 0
    rep = _json(tmp_path / "memory_report.json")
    assert rep["grad_ratio"] == 0.05 and rep["optim_elements"] == 2 * rep["grad_elements"]


def test_head_only_trains_head_only(tmp_path):
    assert run("train", tmp_path, sets=["train.method=head-only"]) == 0
    info = _json(tmp_path / "train.json")
    assert info["masked_names"] == [] and info["trainable"] == 0
    inc = persistence.load_increment(tmp_path / "increment.bin")
    assert sorted(inc.entries) == ["head.bias", "head.weight"]


def test_merge_reproduces_fine_tuned_model(tmp_path):
    assert run("train", tmp_path, sets=["train.rate=0.1"]) == 0
    assert run("merge", tmp_path) == 0
    merged = persistence.load_checkpoint(tmp_path / "merged.ckpt")
    cfg = parse_config_text((tmp_path / "config.txt").read_text())
    ds = harness.task_from_config(cfg)
    model = make_model(harness.model_config(cfg, ds))
    acc = harness.accuracy(model, merged, ds)
    assert acc == _json(tmp_path / "train.json")["final"]["eval_acc"]


def test_analysis_verbs_and_report(tmp_path):
    for verb in ("pretrain", "analyze-grads", "verify-bound", "scan-landscape"):
        assert run(verb, tmp_path) == 0, verb
    bound = _json(tmp_path / "bound.json")
    assert bound["all_hold"] and all(r["holds"] for r in bound["rows"])
    prof = bound["profiles"]["theta1"]
    assert "energy_fraction" in prof and "abs_fraction" in prof
    lines = (tmp_path / "scan_1d.csv").read_text().splitlines()
    assert "alpha,loss,flag" in lines and len([l for l in lines if l[0].isdigit() or l[0] == "-"]) == 5
    assert run("report", tmp_path) == 0
    rep = _json(tmp_path / "report.json")
    assert "bound" in rep["sources"] and rep["summary"]["bound_all_hold"]


def test_compare_deterministic_and_budget_monotone(tmp_path):
    sets = ["compare.methods=sift,random,head-only", "compare.rates=0.01,0.05,0.2", "compare.seeds=0",
            "train.epochs=1"]
    assert run("compare", tmp_path / "a", sets=sets) == 0
    assert run("compare", tmp_path / "b", sets=sets) == 0
    a = (tmp_path / "a" / "compare.json").read_bytes()
    assert a == (tmp_path / "b" / "compare.json").read_bytes()
    rows = json.loads(a)["rows"]
    for m in ("sift", "random"):
        counts = [r["trainable"] for r in rows if r["method"] == m]
        assert counts == sorted(counts) and len(counts) == 3


def test_config_errors_exit_2(tmp_path, capsys):
    assert run("train", tmp_path, sets=["no.such.key=1"]) == 2
    assert run("train", tmp_path, sets=["train.rate=abc"]) == 2
    assert run("train", tmp_path, sets=["train.method=magic"]) == 2
    assert run("train", tmp_path, sets=["train.filter=XYZ"]) == 2
    assert main(["train", "--out", str(tmp_path), "--config", str(tmp_path / "missing.txt")]) == 2


def test_io_errors_exit_4(tmp_path):
    assert run("merge", tmp_path / "empty") == 4
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "theta1.ckpt").write_bytes(b"garbage!")
    (tmp_path / "bad" / "increment.bin").write_bytes(b"garbage!")
    assert run("merge", tmp_path / "bad") == 4
    assert run("report", tmp_path / "nothing") == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3_keeps_partial_artifacts(tmp_path):
    assert run("train", tmp_path, sets=["train.lr=1e200", "train.rate=0.5"]) == 3
    info = _json(tmp_path / "train.json")
    assert info["diverged"] is True
    assert (tmp_path / "metrics.csv").exists()


def test_seed_and_env_out(tmp_path, monkeypatch):
    monkeypatch.setenv("SIFTLAB_OUT", str(tmp_path / "env"))
    argv = ["calibrate", "--seed", "7", "--threads", "2"]
    for s in TINY:
        argv += ["--set", s]
    assert main(argv) == 0
    man = _json(tmp_path / "env" / "manifest.json")
    assert set(man["seeds"].values()) == {7} and man["config"]["run.threads"] == 2


def test_console_script_entry():
    out = subprocess.run([sys.executable, "-m", "siftlab.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "scan-landscape" in out.stdout
