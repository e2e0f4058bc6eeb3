import csv

import numpy as np
import pytest
import torch

from conftest import ConstantActionModel, straight_scenario
from kinetraj import pipeline
from kinetraj.model import load_checkpoint
from kinetraj.objectives import total_loss
from kinetraj import desk
from kinetraj.pipeline import (METRIC_COLUMNS, DivergenceError, TrainConfig, cv_baseline,
                               cv_baseline_metrics, displacement_metrics, predict, predict_hms,
                               predict_hss, rollout_segment, train, training_samples)

TINY = dict(d_model=16, heads=2, ff_dim=32, encoder_layers=1, merge_layers=1,
            map_channels=(4, 8, 8, 16), raster_size=32, loss_raster_size=64)


def tiny_config(**kw):
    return TrainConfig(**{**TINY, "batch_size": 8, "epochs": 2, **kw})


# ---------------------------------------------------------------- config

def test_config_defaults_follow_motion_model():
    assert TrainConfig(motion_model="CV").bounds_lower == (-30.0, -10.0)
    assert TrainConfig().bounds_upper == (8.0, 0.7)


@pytest.mark.parametrize("kw", [dict(regime="XYZ"), dict(motion_model="bicycle"),
                                dict(batch_size=0), dict(epochs=0), dict(learning_rate=0.0),
                                dict(hms_train_mode="sometimes"),
                                dict(bounds_lower=(1, 1), bounds_upper=(0, 0))])
def test_config_rejects_invalid(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_from_dict_unknown_key():
    with pytest.raises(KeyError, match="lamda_delta"):
        TrainConfig.from_dict({"lamda_delta": 1.0})


def test_config_round_trip():
    cfg = TrainConfig(regime="HMS", motion_model="CV", lambda_delta=0.5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("regime,cycles", [("HSS", 1), ("HMS", 3)])
def test_config_steps(regime, cycles):
    st = TrainConfig(regime=regime).steps(10.0)
    assert st == {"history": 20, "total": 30, "cycle": 10, "cycles": cycles}


def test_desk_runs_share_optimiser_settings():
    cfgs = {name: desk.config(name) for name in desk.RUNS}
    assert {(c.epochs, c.batch_size, c.learning_rate, c.seed) for c in cfgs.values()} == {
        (desk.BASE.epochs, desk.BASE.batch_size, desk.BASE.learning_rate, desk.BASE.seed)}
    free = cfgs["HSS+CTRA unbounded"]
    assert not free.bounded_head and free.lambda_delta == 0.0
    assert cfgs["WMM"].motion_model == "none" and cfgs["HMS+CTRA"].regime == "HMS"
    assert desk.config("WMM", epochs=3).epochs == 3


def test_hms_needs_whole_cycles():
    with pytest.raises(ValueError):
        TrainConfig(regime="HMS", cycle_s=0.7).steps(10.0)


# ---------------------------------------------------------------- CV baseline

@pytest.mark.parametrize("speed,heading", [(0.0, 0.0), (2.0, 0.0), (13.0, 2.3)])
def test_cv_baseline_exact_on_straight_lines(speed, heading):
    s = straight_scenario(speed=speed, heading=heading)
    pred = cv_baseline(s)
    np.testing.assert_allclose(pred, s.ego.positions[20:50], atol=1e-9)


def test_cv_baseline_window_average():
    s = straight_scenario(speed=1.0)
    s.ego.positions[16:20] = [[1.6, 0.0], [1.7, 0.0], [1.8, 0.0], [2.4, 0.0]]
    # velocity over the last 3 steps: (2.4 - 1.6) / 0.3
    pred = cv_baseline(s, window=3, horizon=2)
    np.testing.assert_allclose(pred, [[2.4 + 0.8 / 3, 0.0], [2.4 + 1.6 / 3, 0.0]], atol=1e-12)


def test_cv_baseline_needs_history():
    s = straight_scenario()
    s.ego.observed_mask[:19] = False
    with pytest.raises(ValueError):
        cv_baseline(s)


def test_cv_baseline_metrics_hand_values():
    exact = straight_scenario(speed=3.0)
    late = straight_scenario(speed=3.0)
    # the future drifts 2 m sideways in a straight line: every error is 2 m
    late.ego.positions[20:] += [0.0, 2.0]
    ade, fde = cv_baseline_metrics([exact, late])
    assert ade == pytest.approx(1.0) and fde == pytest.approx(1.0)


# ---------------------------------------------------------------- inference

def test_hss_output_is_thirty_steps(synth_small):
    model = ConstantActionModel()
    pred = predict_hss(model, synth_small[0], tiny_config())
    assert pred.trajectory.shape[1:] == (30, 2) and pred.actions.shape[1:] == (30, 2)
    assert pred.track_ids[0] == synth_small[0].ego.track_id


@pytest.mark.parametrize("speed,heading", [(0.0, 0.0), (8.0, 0.4), (14.0, -2.0)])
def test_hms_equals_hss_for_constant_actions(speed, heading):
    # zero acceleration and yaw rate: three 1 s cycles continue one 3 s roll-out
    s = straight_scenario(speed=speed, heading=heading, others=[(2.0, 3.5)])
    model = ConstantActionModel()
    cfg = tiny_config()
    hss = predict_hss(model, s, cfg)
    hms = predict_hms(model, s, cfg)
    np.testing.assert_allclose(hms.world_trajectory, hss.world_trajectory, atol=1e-9)
    np.testing.assert_allclose(hms.trajectory, hss.trajectory, atol=1e-9)


def test_hms_window_mechanics():
    s = straight_scenario(speed=3.0, others=[(0.0, 3.5)])
    model = ConstantActionModel(action=(0.5, 0.05))
    pred = predict_hms(model, s, tiny_config())
    assert len(pred.windows) == 3 and len(pred.segments) == 3
    ego_world = pred.world_trajectory[0]
    # cycle 1 input: the last second of observed history plus the first predicted second
    np.testing.assert_allclose(pred.windows[1][0], np.concatenate(
        [s.ego.positions[10:20], ego_world[:10]]), atol=1e-12)
    # cycle 2 input: the first two predicted seconds
    np.testing.assert_allclose(pred.windows[2][0], ego_world[:20], atol=1e-12)
    # each cycle is framed at its own anchor
    np.testing.assert_allclose(pred.segments[1].frame.anchor, ego_world[9], atol=1e-12)


def test_hms_keeps_agent_order():
    s = straight_scenario(speed=3.0, others=[(0.0, 5.0), (0.0, 6.0)])
    pred = predict_hms(ConstantActionModel(action=(0.0, 0.3)), s, tiny_config())
    assert pred.track_ids == ["ego", "a0", "a1"]


@pytest.mark.parametrize("regime", ["HSS", "HMS"])
def test_rollout_reproduces_emitted_trajectory(regime, synth_small):
    model = ConstantActionModel(action=(1.5, -0.2))
    cfg = tiny_config(regime=regime)
    for pred in predict(model, synth_small, cfg):
        parts = []
        for seg in pred.segments:
            traj = rollout_segment(seg.init, seg.actions, 0.1, "CTRA")
            assert np.abs(traj - seg.trajectory).max() <= 1e-9
            parts.append(seg.frame.to_world(traj))
        assert np.abs(np.concatenate(parts, axis=1) - pred.world_trajectory).max() <= 1e-9


def test_wmm_prediction_has_no_actions(synth_small):
    torch.manual_seed(0)
    model = pipeline.HybridModel(tiny_config(motion_model="none").model_config()).double()
    pred = predict_hss(model, synth_small[0], tiny_config(motion_model="none"))
    assert pred.actions is None and pred.world_trajectory.shape[1] == 30


def test_displacement_metrics_perfect_prediction():
    s = straight_scenario(speed=4.0, others=[(0.0, 3.0)])
    pred = predict_hss(ConstantActionModel(), s, tiny_config())
    ade, fde = displacement_metrics([pred], [s], all_agents=True)
    assert ade < 1e-9 and fde < 1e-9


# ---------------------------------------------------------------- training

def test_training_samples_per_cycle(synth_small):
    samples, steps = training_samples(synth_small[:2], tiny_config(regime="HMS"))
    assert steps == 10 and len(samples) == 6
    full, steps = training_samples(synth_small[:2], tiny_config(regime="HMS",
                                                               hms_train_mode="full_horizon"))
    assert steps == 30 and len(full) == 2


def test_train_writes_artifacts(tmp_path, synth_small):
    cfg = tiny_config()
    res = train(cfg, synth_small[:6], synth_small[6:], out_dir=tmp_path)
    for name in ("best.ckpt", "last.ckpt", "metrics.csv"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == METRIC_COLUMNS and len(rows) == 2
    model, config = load_checkpoint(tmp_path / "best.ckpt", cfg.checkpoint_config())
    assert config["train"]["epochs"] == 2
    assert res.best_val_ade == min(r["val_ADE"] for r in res.history)


def test_train_deterministic(synth_small):
    cfg = tiny_config(seed=11)
    a = train(cfg, synth_small[:4], synth_small[4:6])
    b = train(cfg, synth_small[:4], synth_small[4:6])
    assert a.history == b.history


def test_train_needs_data(synth_small):
    with pytest.raises(ValueError):
        train(tiny_config(), [], synth_small)


def test_divergence_detected(monkeypatch, synth_small):
    def broken(*args, **kwargs):
        return total_loss(torch.tensor(float("nan"), requires_grad=True))
    monkeypatch.setattr(pipeline, "batch_losses", broken)
    with pytest.raises(DivergenceError):
        train(tiny_config(), synth_small[:2], synth_small[2:4])


@pytest.mark.slow
def test_overfit_small_set(synth_small):
    cfg = tiny_config(epochs=25, batch_size=4, learning_rate=3e-3, lambda_offroad=0.0)
    res = train(cfg, synth_small[:4], synth_small[:4])
    assert res.history[-1]["L_MSE"] < 0.5 * res.history[0]["L_MSE"]
