import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bmaml import checkpoint
from bmaml.cli import main
from bmaml.config import ConfigError, ExperimentConfig, apply_overrides, default_epochs, from_dict, load_config
from bmaml.experiment import eval_summary, train

SMALL_SINUSOID = {
    "algo": "bmaml",
    "suite": "sinusoid",
    "seed": 3,
    "task_count": 6,
    "iterations": 3,
    "eval_interval": 2,
    "eval_tasks": 3,
    "n_test": 10,
    "meta": {"num_particles": 2, "meta_batch": 2},
}


def _write(tmp_path, raw, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


# -------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_and_size(tmp_path):
    theta = np.random.default_rng(0).normal(size=(5, 1000))
    path = tmp_path / "a.ckpt"
    checkpoint.save(path, theta)
    assert path.stat().st_size == 20 + 5 * 1000 * 8 + 8
    back = checkpoint.load(path)
    assert back.tobytes() == theta.tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(allow_nan=True, allow_infinity=True)))
def test_checkpoint_round_trip_is_bit_exact(theta):
    assert checkpoint.decode(checkpoint.encode(theta)).tobytes() == theta.tobytes()


def test_checkpoint_header_layout():
    blob = checkpoint.encode(np.array([[1.0, 2.0]]))
    assert blob[:4] == b"BMLC"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 1
    assert int.from_bytes(blob[12:20], "little") == 2
    payload = blob[20:36]
    assert int.from_bytes(blob[36:44], "little") == sum(payload)


def test_checkpoint_errors():
    blob = checkpoint.encode(np.ones((2, 3)))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(blob[:-3])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(blob[:10])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(b"XXXX" + blob[4:])
    with pytest.raises(checkpoint.UnsupportedVersionError):
        checkpoint.decode(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
    bad = bytearray(blob)
    bad[25] ^= 0xFF
    with pytest.raises(checkpoint.ChecksumError):
        checkpoint.decode(bytes(bad))


# ------------------------------------------------------------------ config


def test_config_defaults_and_epochs():
    cfg = ExperimentConfig()
    assert (cfg.task_count, cfg.K, cfg.meta.meta_batch) == (100, 5, 10)
    assert default_epochs(100) == 10000 and default_epochs(1000) == 1000
    assert cfg.total_iterations == 10000 * 10
    assert ExperimentConfig(epochs=2, task_count=15).total_iterations == 4
    assert ExperimentConfig(algo="svpg-chaser", suite="nav2d").total_iterations == 100


def test_config_validation_names_fields():
    with pytest.raises(ConfigError, match="incompatible"):
        from_dict({"algo": "svpg-chaser", "suite": "sinusoid"})
    with pytest.raises(ConfigError, match="bogus"):
        from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="meta.colour"):
        from_dict({"meta": {"colour": 1}})
    with pytest.raises(ConfigError, match="inner_lr"):
        from_dict({"meta": {"inner_lr": -1}})
    with pytest.raises(ConfigError, match="num_particles"):
        from_dict({"algo": "maml", "meta": {"num_particles": 3}})
    assert from_dict({"algo": "maml"}).meta.num_particles == 1


def test_overrides(tmp_path):
    raw = apply_overrides({"meta": {"inner_lr": 0.01}}, ["seed=7", "meta.inner_lr=0.02", "output_dir=runs/x"])
    assert raw == {"seed": 7, "meta": {"inner_lr": 0.02}, "output_dir": "runs/x"}
    cfg = load_config(_write(tmp_path, SMALL_SINUSOID), ["meta.kernel.mode=fixed", "meta.kernel.h=0.5"])
    assert cfg.meta.kernel.h == 0.5
    with pytest.raises(ConfigError):
        apply_overrides({}, ["noequals"])


# ---------------------------------------------------------------- training


def test_training_writes_metrics_and_checkpoints(tmp_path):
    res = train(from_dict(SMALL_SINUSOID), tmp_path / "run")
    with open(tmp_path / "run" / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "meta_loss", "eval_mse_or_acc_or_return", "wall_ms"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    assert all(r[3] == "0" for r in rows[1:])
    final = checkpoint.load(tmp_path / "run" / "final.ckpt")
    assert final.tobytes() == res.theta.tobytes()
    assert checkpoint.load(tmp_path / "run" / "best.ckpt").shape == final.shape
    assert json.loads((tmp_path / "run" / "config.json").read_text())["seed"] == 3


def test_reruns_are_byte_identical(tmp_path):
    cfg = _write(tmp_path, SMALL_SINUSOID)
    for name in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name), "--quiet"]) == 0
    for f in ("metrics.csv", "final.ckpt", "best.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert main(["train", "--config", cfg, "--override", "seed=7", "--out", str(tmp_path / "c"), "--quiet"]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "c" / "metrics.csv").read_bytes()


def test_cli_exit_codes(tmp_path, capsys):
    bad = _write(tmp_path, {"algo": "svpg-chaser", "suite": "sinusoid"}, "bad.json")
    assert main(["train", "--config", bad]) == 2
    assert "incompatible" in capsys.readouterr().err
    diverge = _write(tmp_path, {**SMALL_SINUSOID, "meta": {"num_particles": 2, "meta_batch": 2, "inner_lr": 1e300}})
    assert main(["train", "--config", diverge, "--out", str(tmp_path / "d"), "--quiet"]) == 3
    assert "iteration 1" in capsys.readouterr().err


def test_cli_module_entry_point(tmp_path):
    bad = _write(tmp_path, {"algo": "svpg-chaser", "suite": "sinusoid"}, "bad.json")
    proc = subprocess.run([sys.executable, "-m", "bmaml.cli", "train", "--config", bad], capture_output=True, text=True)
    assert proc.returncode == 2


def test_eval_and_corrupted_checkpoint(tmp_path):
    cfg = _write(tmp_path, SMALL_SINUSOID)
    run = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(run), "--quiet"]) == 0
    out = tmp_path / "eval.json"
    assert main(["eval", "--checkpoint", str(run / "final.ckpt"), "--override", "eval_tasks=1",
                 "--out", str(out), "--quiet"]) == 0
    summary = json.loads(out.read_text())
    assert summary["std"] == 0.0 and summary["eval_tasks"] == 1 and summary["metric"] == "mse"
    blob = bytearray((run / "final.ckpt").read_bytes())
    blob[40] ^= 0x01
    (run / "bad.ckpt").write_bytes(bytes(blob))
    assert main(["eval", "--checkpoint", str(run / "bad.ckpt"), "--quiet"]) == 4
    (run / "short.ckpt").write_bytes(bytes(blob[:30]))
    assert main(["eval", "--checkpoint", str(run / "short.ckpt"), "--quiet"]) == 5


def test_eval_summary_statistics():
    cfg = from_dict({**SMALL_SINUSOID, "eval_tasks": 4})
    theta = np.zeros((2, 3403))
    s = eval_summary(cfg, theta, 4, 0)
    assert len(s["per_task"]) == 4
    assert s["mean"] == pytest.approx(np.mean(s["per_task"]))
    assert s["std"] == pytest.approx(np.std(s["per_task"]))


def test_cli_active(tmp_path):
    raw = {
        "algo": "bmaml",
        "suite": "active",
        "iterations": 2,
        "eval_interval": 1,
        "eval_tasks": 2,
        "K": 1,
        "task_count": 4,
        "meta": {"num_particles": 2, "meta_batch": 2},
        "classification": {"pool_size": 3, "hidden": [8]},
    }
    cfg = _write(tmp_path, raw)
    run = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(run), "--quiet"]) == 0
    out = tmp_path / "active.csv"
    assert main(["active", "--checkpoint", str(run / "final.ckpt"), "--out", str(out), "--quiet"]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["acquisitions", "acc_entropy_mean", "acc_random_mean"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]
    # before any acquisition both strategies share the same adapted particles
    assert rows[1][1] == rows[1][2]


def test_rl_train_smoke(tmp_path):
    raw = {
        "algo": "vpg-reptile",
        "suite": "nav2d",
        "iterations": 2,
        "eval_interval": 1,
        "eval_tasks": 2,
        "rl": {"K": 2, "meta_batch": 2, "num_particles": 2, "horizon": 5},
    }
    cfg = _write(tmp_path, raw)
    assert main(["rl-train", "--config", cfg, "--out", str(tmp_path / "run"), "--quiet"]) == 0
    rows = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    assert len(rows) == 3
    assert main(["rl-train", "--config", _write(tmp_path, SMALL_SINUSOID, "s.json"), "--quiet"]) == 2
