import json
import logging
import xml.etree.ElementTree as ET

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from conftest import ConstantActionModel, straight_scenario
from kinetraj import motion
from kinetraj.evaluation import (FAMILY_ORDER, EvaluationError, MetricRow, accel_histogram, ade,
                                 audit, fde, histogram_bins, load_trajectory_file, overlay_svg,
                                 read_histogram, read_metrics_table, report, write_histogram,
                                 write_histograms, write_trajectory_file)
from kinetraj.objectives import BoundSpec
from kinetraj.pipeline import TrainConfig, predict
from kinetraj.scenario import MapGrid, rle_encode

CTRA = BoundSpec.default("CTRA")
CFG = TrainConfig(raster_size=32, loss_raster_size=64)


def test_ade_fde_hand_values():
    truth = np.zeros((3, 2))
    pred = np.array([[3.0, 4.0], [0.0, 1.0], [0.0, 2.0]])
    assert ade(pred, truth) == pytest.approx(8.0 / 3)
    assert fde(pred, truth) == pytest.approx(2.0)


def test_ade_fde_mask():
    truth = np.zeros((3, 2))
    pred = np.array([[3.0, 4.0], [0.0, 1.0], [0.0, 9.0]])
    mask = [True, True, False]
    assert ade(pred, truth, mask) == pytest.approx(3.0)
    assert fde(pred, truth, mask) == pytest.approx(1.0)


@pytest.mark.parametrize("pred,truth,mask", [
    (np.zeros((3, 2)), np.zeros((4, 2)), None),
    (np.zeros((3, 3)), np.zeros((3, 3)), None),
    (np.zeros((3, 2)), np.zeros((3, 2)), [False] * 3),
])
def test_ade_errors(pred, truth, mask):
    with pytest.raises(EvaluationError):
        ade(pred, truth, mask)


def test_metric_row_rejects_negative():
    with pytest.raises(EvaluationError):
        MetricRow("CV", -1.0, 0.0, 1)


@pytest.mark.parametrize("values,width,expected", [
    ([0.2, -0.4, 0.9, 1.4, 5.37], 1.0, [(0.0, 2), (1.0, 2), (5.0, 1)]),
    ([-1.23, -0.8], 0.5, [(-1.0, 2)]),
    ([], 1.0, []),
])
def test_histogram_bins(values, width, expected):
    assert histogram_bins(values, width) == expected


@given(st.lists(st.floats(-200, 200), max_size=60), st.sampled_from([0.25, 0.5, 1.0, 2.0]))
def test_histogram_mass_preserved(values, width):
    bins = histogram_bins(values, width)
    assert sum(c for _, c in bins) == len(values)
    assert all(c > 0 for _, c in bins)
    assert [v for v, _ in bins] == sorted(v for v, _ in bins)


def test_stationary_predictions_single_zero_bin():
    scenes = [straight_scenario(speed=0.0) for _ in range(4)]
    preds = predict(ConstantActionModel(), scenes, CFG)
    for source in ("head", "rollout"):
        rep = accel_histogram(preds, 0.1, CTRA, source=source)
        assert rep.histogram("ax") == [(0.0, 4)] and rep.histogram("ay") == [(0.0, 4)]
        assert rep.exceed_fraction(CTRA) == 0.0


def test_head_and_rollout_sources_agree_on_straight_acceleration():
    preds = predict(ConstantActionModel(action=(1.5, 0.0)), [straight_scenario(speed=3.0)], CFG)
    head = accel_histogram(preds, 0.1, CTRA, source="head")
    roll = accel_histogram(preds, 0.1, CTRA, source="rollout")
    assert head.ax_max[0] == pytest.approx(1.5)
    assert roll.ax_max[0] == pytest.approx(1.5, abs=1e-6)


def test_ctra_lateral_acceleration_is_speed_times_yaw_rate():
    preds = predict(ConstantActionModel(action=(0.0, 0.2)), [straight_scenario(speed=5.0)], CFG)
    rep = accel_histogram(preds, 0.1, CTRA, source="head")
    assert rep.ay_max[0] == pytest.approx(1.0)


def test_exceed_fraction_counts_scenarios():
    scenes = [straight_scenario(speed=2.0), straight_scenario(speed=4.0)]
    preds = predict(ConstantActionModel(action=(9.0, 0.0)), scenes, CFG)
    rep = accel_histogram(preds, 0.1, CTRA)
    assert rep.exceed_fraction(CTRA) == 1.0
    assert rep.violations.tolist() == [30, 30]
    assert not rep.feasible.any()


def test_unknown_source():
    with pytest.raises(EvaluationError):
        accel_histogram([], 0.1, source="imu")


def ctra_path(actions, init=(0.0, 0.0, 0.0, 5.0), dt=0.1):
    state = motion.KinematicState(*init, init[3], 0.0)
    return motion.rollout(state, torch.as_tensor(np.asarray(actions, float)), dt, "CTRA").numpy()


def test_audit_feasible_path():
    acts = np.column_stack([np.linspace(-2, 2, 30), np.linspace(0.3, -0.3, 30)])
    traj = ctra_path(acts)
    rep = audit([traj], [(0.0, 0.0, 0.0, 5.0)], 0.1, CTRA)
    assert rep.feasible.tolist() == [True]
    np.testing.assert_allclose(rep.action_max[0], [2.0, 0.3], atol=1e-6)


def test_audit_flags_teleport():
    traj = ctra_path(np.zeros((30, 2)))
    traj[15:] += [20.0, 0.0]
    rep = audit([traj], [(0.0, 0.0, 0.0, 5.0)], 0.1, CTRA)
    assert rep.feasible.tolist() == [False]


def test_audit_offroad_strip_counts_pixels():
    mask = np.ones((10, 40), np.uint8)
    mask[:, 10:14] = 0     # a 4-pixel wide strip, 2 m at 0.5 m/px
    grid = MapGrid(mask, 0.5, (0.0, 0.0))
    traj = ctra_path(np.zeros((30, 2)), init=(0.0, 2.5, 0.0, 5.0))
    rep = audit([traj], [(0.0, 2.5, 0.0, 5.0)], 0.1, CTRA, grids=[grid])
    assert rep.offroad.tolist() == [4]
    assert rep.violations.tolist() == [0] and rep.feasible.tolist() == [False]


def test_trajectory_file_round_trip(tmp_path):
    traj = ctra_path(np.zeros((5, 2)))
    write_trajectory_file(tmp_path / "t.json", [traj], [(0.0, 0.0, 0.0, 5.0)], 0.1, ids=["a"])
    doc = load_trajectory_file(tmp_path / "t.json")
    assert doc["ids"] == ["a"] and doc["dt"] == 0.1 and doc["grids"] is None
    np.testing.assert_allclose(doc["trajectories"][0], traj)


def test_trajectory_file_with_map(tmp_path):
    mask = np.zeros((3, 4), np.uint8)
    mask[1] = 1
    doc = {"dt": 0.1, "trajectories": [{"id": "x", "init": [0, 0, 0, 1], "points": [[0.1, 0.0]]}],
           "map": {"width": 4, "height": 3, "resolution": 1.0, "origin": [0, 0],
                   "driveable_rle": rle_encode(mask)}}
    (tmp_path / "m.json").write_text(json.dumps(doc))
    loaded = load_trajectory_file(tmp_path / "m.json")
    np.testing.assert_array_equal(loaded["grids"][0].driveable, mask)


def test_trajectory_file_malformed(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"trajectories": [{"id": 1}]}))
    with pytest.raises(EvaluationError):
        load_trajectory_file(tmp_path / "bad.json")


def test_report_orders_rows_by_family(tmp_path):
    rows = [MetricRow("HMS+CTRA", 1.6, 3.65, 5), MetricRow("mine", 9.0, 9.0, 5),
            MetricRow("CV", 3.53, 7.78, 5), MetricRow("WMM", 2.2, 5.75, 5)]
    paths = report(tmp_path, rows)
    assert [p.name for p in paths] == ["metrics.csv"]
    labels = [r.label for r in read_metrics_table(tmp_path / "metrics.csv")]
    assert labels == ["CV", "WMM", "HMS+CTRA", "mine"]
    assert FAMILY_ORDER.index("WMM") < FAMILY_ORDER.index("HSS+CV")


def test_report_requires_rows(tmp_path):
    with pytest.raises(EvaluationError):
        report(tmp_path, [])


def test_histograms_omitted_without_reports(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert write_histograms(tmp_path) == []
    assert "omitted" in caplog.text
    assert not list(tmp_path.glob("histogram_*"))


def test_histogram_file_names_and_schema(tmp_path):
    preds = predict(ConstantActionModel(action=(1.0, 0.1)), [straight_scenario(speed=3.0)], CFG)
    rep = accel_histogram(preds, 0.1, CTRA)
    paths = write_histograms(tmp_path, with_delta=rep, without_delta=rep)
    assert sorted(p.name for p in paths) == sorted(
        f"histogram_{f}_{t}_delta.csv" for f in ("ax", "ay") for t in ("with", "without"))
    assert (tmp_path / "histogram_ax_with_delta.csv").read_text().splitlines()[0] == "Value,Frequency"
    assert read_histogram(tmp_path / "histogram_ax_with_delta.csv") == rep.histogram("ax")


def test_histogram_round_trip(tmp_path):
    bins = [(-1.0, 3), (0.0, 1), (5.0, 2)]
    write_histogram(tmp_path / "h.csv", bins)
    assert read_histogram(tmp_path / "h.csv") == bins


def test_histogram_bad_columns(tmp_path):
    (tmp_path / "h.csv").write_text("value,count\n1,2\n")
    with pytest.raises(EvaluationError):
        read_histogram(tmp_path / "h.csv")


def test_overlay_svg_series(tmp_path):
    hist = np.column_stack([np.arange(5.0), np.zeros(5)])
    overlay_svg(tmp_path / "o.svg", hist, hist + [5, 0], hist + [5, 1])
    root = ET.parse(tmp_path / "o.svg").getroot()
    lines = {el.get("id"): el.get("stroke") for el in root.iter("{http://www.w3.org/2000/svg}polyline")}
    assert lines == {"history": "orange", "prediction": "red", "ground_truth": "green"}


def test_overlay_svg_without_truth(tmp_path):
    hist = np.zeros((3, 2))
    overlay_svg(tmp_path / "o.svg", hist, hist)
    assert 'id="ground_truth"' not in (tmp_path / "o.svg").read_text()
