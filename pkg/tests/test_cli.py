import csv
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from kinetraj import cli
from kinetraj.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, load_config, parse_bounds, run
from kinetraj.evaluation import read_histogram, write_trajectory_file
from kinetraj.motion import KinematicState, rollout
from kinetraj.pipeline import DivergenceError

FIXTURES = Path(__file__).parent / "fixtures"

TINY_TOML = """
[train]
epochs = 1
batch_size = 4
d_model = 16
heads = 2
ff_dim = 32
encoder_layers = 1
merge_layers = 1
map_channels = [4, 8, 8, 16]
raster_size = 32
loss_raster_size = 64
"""


@pytest.fixture(autouse=True)
def _keep_threads():
    n = torch.get_num_threads()
    yield
    torch.set_num_threads(n)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic data plus a one-epoch tiny checkpoint, built once through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert run(["--threads", "1", "gen-data", "--set", "counts.cv=3", "--set", "counts.turn=3",
                "--seed", "5", "--out", str(root / "data")]) == EXIT_OK
    (root / "tiny.toml").write_text(TINY_TOML)
    assert run(["--threads", "1", "train", "--data", str(root / "data"), "--config",
                str(root / "tiny.toml"), "--out", str(root / "run")]) == EXIT_OK
    return root


def test_no_command_is_usage_error():
    assert run([]) == EXIT_USAGE


def test_unknown_flag_is_usage_error(tmp_path):
    assert run(["gen-data", "--out", str(tmp_path), "--bogus"]) == EXIT_USAGE


def test_unknown_config_key_is_usage_error(tmp_path):
    assert run(["gen-data", "--set", "colour=blue", "--out", str(tmp_path)]) == EXIT_USAGE
    assert run(["train", "--data", str(FIXTURES / "synthetic_val"), "--set", "lamda_delta=1",
                "--out", str(tmp_path)]) == EXIT_USAGE


def test_missing_data_is_data_error(tmp_path):
    assert run(["evaluate", "--data", str(tmp_path / "nowhere.json"), "--baseline", "cv",
                "--out", str(tmp_path)]) == EXIT_DATA


def test_corrupt_checkpoint_is_data_error(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    assert run(["predict", "--data", str(FIXTURES / "synthetic_val"), "--checkpoint",
                str(tmp_path / "bad.ckpt"), "--out", str(tmp_path)]) == EXIT_DATA


def test_divergence_is_numeric_error(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise DivergenceError("non-finite loss")
    monkeypatch.setattr(cli, "train", boom)
    assert run(["train", "--data", str(FIXTURES / "synthetic_val"), "--out",
                str(tmp_path)]) == EXIT_NUMERIC


def test_load_config_section_and_overrides(tmp_path):
    (tmp_path / "c.toml").write_text("[train]\nepochs = 3\nregime = 'HMS'\n")
    values = load_config(tmp_path / "c.toml", "train",
                         ["train.epochs=7", "map_channels=[1, 2]", "regime=HSS"])
    assert values == {"epochs": 7, "regime": "HSS", "map_channels": [1, 2]}


@pytest.mark.parametrize("text,lo,hi", [("default", [-8, -0.7], [8, 0.7]),
                                        ("-2,-0.1:2,0.1", [-2, -0.1], [2, 0.1])])
def test_parse_bounds(text, lo, hi):
    b = parse_bounds(text, "CTRA")
    assert b.lower.tolist() == lo and b.upper.tolist() == hi


def test_parse_bounds_malformed():
    with pytest.raises(cli.UsageError):
        parse_bounds("1,2", "CTRA")


def test_gen_data_manifest(workspace):
    files = sorted((workspace / "data").glob("*.json"))
    scenes = [f for f in files if f.name != "manifest.json"]
    assert len(scenes) == 6
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["seed"] == 5
    assert manifest["threads"] == 1
    assert len(manifest["config_hash"]) == 64
    assert set(manifest["versions"]) >= {"kinetraj", "python", "numpy", "torch"}


def test_gen_data_deterministic(tmp_path, workspace):
    assert run(["gen-data", "--set", "counts.cv=3", "--set", "counts.turn=3", "--seed", "5",
                "--out", str(tmp_path)]) == EXIT_OK
    for f in (workspace / "data").glob("synth-*.json"):
        assert (tmp_path / f.name).read_text() == f.read_text()


def test_train_artifacts(workspace):
    run_dir = workspace / "run"
    for name in ("best.ckpt", "last.ckpt", "metrics.csv", "manifest.json"):
        assert (run_dir / name).exists()
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["config"]["d_model"] == 16 and manifest["seed"] == 0


def test_predict_writes_predictions(workspace, tmp_path):
    assert run(["predict", "--data", str(workspace / "data"), "--checkpoint",
                str(workspace / "run" / "best.ckpt"), "--regime", "HMS", "--out",
                str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "predictions.json").read_text())
    assert len(doc) == 6 and doc[0]["regime"] == "HMS"
    assert np.asarray(doc[0]["trajectory"]).shape[1:] == (30, 2)


def test_evaluate_table(workspace, tmp_path):
    assert run(["evaluate", "--data", str(workspace / "data"), "--checkpoint",
                str(workspace / "run" / "best.ckpt"), "--baseline", "cv", "--out",
                str(tmp_path)]) == EXIT_OK
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["CV", "HSS+CTRA"]
    assert all(float(r["ADE"]) >= 0 for r in rows)


def test_evaluate_needs_something(tmp_path):
    assert run(["evaluate", "--data", str(FIXTURES / "synthetic_val"), "--out",
                str(tmp_path)]) == EXIT_USAGE


def test_plot_outputs(workspace, tmp_path):
    ckpt = str(workspace / "run" / "best.ckpt")
    assert run(["plot", "--data", str(workspace / "data"), "--checkpoint", ckpt,
                "--with-delta", ckpt, "--limit", "2", "--out", str(tmp_path)]) == EXIT_OK
    assert len(list(tmp_path.glob("overlay_*.svg"))) == 2
    bins = read_histogram(tmp_path / "histogram_ax_with_delta.csv")
    assert sum(c for _, c in bins) == 6
    assert not (tmp_path / "histogram_ax_without_delta.csv").exists()


def test_audit_teleport_reported_not_failed(tmp_path):
    state = KinematicState(0.0, 0.0, 0.0, 5.0, 5.0, 0.0)
    good = rollout(state, torch.zeros(30, 2, dtype=torch.float64), 0.1, "CTRA").numpy()
    bad = good.copy()
    bad[10:] += [15.0, 0.0]
    write_trajectory_file(tmp_path / "t.json", [good, bad], [(0, 0, 0, 5.0)] * 2, 0.1,
                          ids=["good", "teleport"])
    assert run(["audit", "--trajectories", str(tmp_path / "t.json"), "--out",
                str(tmp_path / "out")]) == EXIT_OK
    rep = json.loads((tmp_path / "out" / "feasibility.json").read_text())
    assert [r["feasible"] for r in rep["scenarios"]] == [True, False]


def test_convert_argoverse(tmp_path):
    assert run(["convert", "--input", str(FIXTURES / "argoverse_sample.csv"), "--out",
                str(tmp_path)]) == EXIT_OK
    scenes = [f for f in tmp_path.glob("*.json") if f.name != "manifest.json"]
    doc = json.loads(scenes[0].read_text())
    assert doc["frequency_hz"] == 10.0 and doc["split_index"] == 20


@pytest.mark.parametrize("env,flag,expected", [("2", None, 2), ("2", "1", 1), (None, "3", 3)])
def test_thread_count(tmp_path, monkeypatch, env, flag, expected):
    if env is None:
        monkeypatch.delenv(cli.THREADS_ENV, raising=False)
    else:
        monkeypatch.setenv(cli.THREADS_ENV, env)
    argv = (["--threads", flag] if flag else []) + ["gen-data", "--set", "counts.cv=1",
                                                    "--out", str(tmp_path)]
    assert run(argv) == EXIT_OK
    assert json.loads((tmp_path / "manifest.json").read_text())["threads"] == expected


def test_bad_thread_count(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    assert run(["gen-data", "--out", str(tmp_path)]) == EXIT_USAGE
