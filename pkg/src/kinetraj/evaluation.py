"""Displacement metrics, acceleration histograms, feasibility audits and report files."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import motion
from .objectives import BoundSpec, delta_loss_exact, offroad_exact
from .scenario import MapGrid

log = logging.getLogger(__name__)

# report row order: baseline, learned-only, then hybrid families
FAMILY_ORDER = ("CV", "LSTM", "VectorNet", "HOME", "WMM", "HSS+CV", "HSS+CTRA", "HMS+CV",
                "HMS+CTRA")
HISTOGRAM_COLUMNS = ("Value", "Frequency")
SERIES_COLOURS = {"history": "orange", "prediction": "red", "ground_truth": "green"}


class EvaluationError(ValueError):
    pass


def _displacements(pred, truth, mask=None) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 2 or pred.shape[-1] != 2:
        raise EvaluationError(f"pred {pred.shape} and truth {truth.shape} must both be (K, 2)")
    valid = np.ones(len(pred), bool) if mask is None else np.asarray(mask, bool)
    if not valid.any():
        raise EvaluationError("no valid steps to evaluate")
    return np.hypot(*(pred - truth).T), valid


def ade(pred, truth, mask=None) -> float:
    """Mean Euclidean displacement over the valid steps."""
    dist, valid = _displacements(pred, truth, mask)
    return float(dist[valid].mean())


def fde(pred, truth, mask=None) -> float:
    """Displacement at the last valid step."""
    dist, valid = _displacements(pred, truth, mask)
    return float(dist[np.flatnonzero(valid)[-1]])


@dataclass
class MetricRow:
    label: str
    ade: float
    fde: float
    count: int
    regime: str = ""
    motion_model: str = ""

    def __post_init__(self):
        if self.ade < 0 or self.fde < 0:
            raise EvaluationError("ADE and FDE are nonnegative")


@dataclass
class FeasibilityReport:
    """Per-scenario action extremes, violation and offroad counts.

    ``ax_max``/``ay_max`` hold one maximum per scenario; the histograms bin them.
    """
    scenario_ids: list
    action_max: np.ndarray        # (S, 2)
    action_min: np.ndarray        # (S, 2)
    violations: np.ndarray        # (S,)
    offroad: np.ndarray           # (S,)
    feasible: np.ndarray          # (S,)
    ax_max: np.ndarray            # (S,)
    ay_max: np.ndarray            # (S,)
    source: str = "head"
    bin_width: float = 1.0
    notes: list = field(default_factory=list)

    def __len__(self):
        return len(self.scenario_ids)

    def histogram(self, feature: str) -> list[tuple[float, int]]:
        values = {"ax": self.ax_max, "ay": self.ay_max}[feature]
        return histogram_bins(values, self.bin_width)

    def value_range(self, feature: str) -> tuple[float, float]:
        values = {"ax": self.ax_max, "ay": self.ay_max}[feature]
        return float(values.min()), float(values.max())

    def exceed_fraction(self, bounds: BoundSpec) -> float:
        """Share of scenarios with any action feature outside the bounds."""
        out = (self.action_max > bounds.upper).any(axis=1) | (self.action_min < bounds.lower).any(axis=1)
        return float(out.mean()) if len(out) else 0.0

    def to_dict(self) -> dict:
        rows = []
        for i, sid in enumerate(self.scenario_ids):
            rows.append({"scenario_id": sid, "action_max": self.action_max[i].tolist(),
                         "action_min": self.action_min[i].tolist(),
                         "violations": int(self.violations[i]), "offroad": int(self.offroad[i]),
                         "feasible": bool(self.feasible[i]), "ax_max": float(self.ax_max[i]),
                         "ay_max": float(self.ay_max[i])})
        return {"source": self.source, "bin_width": self.bin_width, "scenarios": rows,
                "notes": list(self.notes)}


def histogram_bins(values, bin_width: float = 1.0) -> list[tuple[float, int]]:
    """Counts per bin centred on multiples of ``bin_width``; empty bins omitted."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return []
    idx = np.round(values / bin_width).astype(np.int64)
    keys, counts = np.unique(idx, return_counts=True)
    return [(float(k * bin_width) + 0.0, int(c)) for k, c in zip(keys, counts)]


def _head_accelerations(kind: str, init: np.ndarray, actions: np.ndarray, dt: float) -> np.ndarray:
    """(K, 2) accelerations taken from the emitted actions.

    CTRA: longitudinal a and lateral v * yaw_rate along the rollout.
    CV: differences of consecutive emitted velocities (init velocity first).
    """
    if kind == "CTRA":
        state = motion.KinematicState.from_array(init)
        _, states = motion.rollout(state, torch.as_tensor(actions), dt, "CTRA", return_states=True)
        speeds = np.concatenate([[init[3]], [float(s.v) for s in states[:-1]]])
        return np.column_stack([actions[:, 0], speeds * actions[:, 1]])
    vel = np.vstack([init[None, 4:6], actions])
    return np.diff(vel, axis=0) / dt


def _rollout_accelerations(init: np.ndarray, trajectory: np.ndarray, dt: float) -> np.ndarray:
    """(K, 2) frame-axis accelerations by differencing the positions twice."""
    pts = np.vstack([init[None, :2], trajectory])
    vel = np.vstack([init[None, 4:6], np.diff(pts, axis=0) / dt])
    return np.diff(vel, axis=0) / dt


def accel_histogram(predictions, dt: float, bounds: BoundSpec | None = None,
                    source: str = "head", bin_width: float = 1.0, grids=None) -> FeasibilityReport:
    """Per-scenario maximum ego a_x and a_y over a set of predictions.

    ``source`` selects the emitted actions ("head") or second differences of
    the rolled-out positions ("rollout"); WMM predictions carry no actions
    and always use "rollout".
    """
    if source not in ("head", "rollout"):
        raise EvaluationError(f"unknown acceleration source {source!r}")
    ids, amax, amin, viol, off, ax, ay = [], [], [], [], [], [], []
    notes = []
    for n, p in enumerate(predictions):
        ids.append(p.scenario_id)
        acts = None if p.actions is None else np.asarray(p.actions[0], dtype=float)
        if source == "head" and acts is not None:
            acc = np.vstack([_head_accelerations(p.model_kind, s.init[0], s.actions[0], dt)
                             for s in p.segments])
        else:
            acc = np.vstack([_rollout_accelerations(s.init[0], s.trajectory[0], dt)
                             for s in p.segments])
        ax.append(acc[:, 0].max())
        ay.append(acc[:, 1].max())
        if acts is not None:
            amax.append(acts.max(axis=0))
            amin.append(acts.min(axis=0))
            viol.append(delta_loss_exact(acts, bounds) if bounds is not None else 0)
        else:
            amax.append(np.full(2, np.nan))
            amin.append(np.full(2, np.nan))
            viol.append(0)
        if grids is not None:
            off.append(offroad_exact(p.world_trajectory[0], grids[n]))
        else:
            off.append(0)
    if predictions and all(p.actions is None for p in predictions) and source == "head":
        notes.append("no action series present; accelerations taken from rollout differences")
    viol = np.asarray(viol, dtype=np.int64)
    off = np.asarray(off, dtype=np.int64)
    return FeasibilityReport(ids, np.array(amax).reshape(-1, 2), np.array(amin).reshape(-1, 2),
                             viol, off, (viol == 0) & (off == 0), np.asarray(ax, dtype=float),
                             np.asarray(ay, dtype=float), source, bin_width, notes)


def audit(trajectories, inits, dt: float, bounds: BoundSpec, grids=None,
          model_kind: str = "CTRA", ids=None, tolerance: float = 1e-6) -> FeasibilityReport:
    """Recover implied actions from arbitrary trajectories and flag the
    infeasible ones: out-of-bound actions, offroad pixels, or a path the
    motion model cannot retrace within ``tolerance`` metres."""
    ids = list(ids) if ids is not None else [str(i) for i in range(len(trajectories))]
    amax, amin, viol, off, feasible, ax, ay = [], [], [], [], [], [], []
    for n, (traj, init) in enumerate(zip(trajectories, inits)):
        traj = np.asarray(traj, dtype=float)
        init = _full_state(init)
        series = motion.invert_trajectory(traj, init, dt, model_kind)
        acts = series.values
        replay = motion.rollout(motion.KinematicState.from_array(init), torch.as_tensor(acts), dt,
                                model_kind).numpy()
        residual = float(np.abs(replay - traj).max())
        v = delta_loss_exact(acts, bounds)
        o = offroad_exact(traj, grids[n]) if grids is not None else 0
        acc = _head_accelerations(model_kind, init, acts, dt)
        amax.append(acts.max(axis=0))
        amin.append(acts.min(axis=0))
        viol.append(v)
        off.append(o)
        feasible.append(v == 0 and o == 0 and residual <= tolerance)
        ax.append(acc[:, 0].max())
        ay.append(acc[:, 1].max())
    return FeasibilityReport(ids, np.array(amax).reshape(-1, 2), np.array(amin).reshape(-1, 2),
                             np.asarray(viol, np.int64), np.asarray(off, np.int64),
                             np.asarray(feasible, bool), np.asarray(ax, float),
                             np.asarray(ay, float), "audit")


def _full_state(init) -> np.ndarray:
    init = np.asarray(init, dtype=float)
    if init.shape == (4,):
        x, y, yaw, v = init
        return np.array([x, y, yaw, v, v * np.cos(yaw), v * np.sin(yaw)])
    if init.shape != (6,):
        raise EvaluationError("init state must be (x, y, yaw, v) or (x, y, yaw, v, vx, vy)")
    return init


def load_trajectory_file(path) -> dict:
    """Read an audit input file.

    Layout: ``{"dt": 0.1, "model_kind": "CTRA", "trajectories": [{"id": ...,
    "init": [x, y, yaw, v], "points": [[x, y], ...]}], "map": {...}}`` where
    the optional map uses the neutral scenario map encoding.
    """
    from .scenario import rle_decode
    doc = json.loads(Path(path).read_text())
    try:
        items = doc["trajectories"]
        out = {"dt": float(doc.get("dt", 0.1)), "model_kind": doc.get("model_kind", "CTRA"),
               "ids": [str(t.get("id", i)) for i, t in enumerate(items)],
               "trajectories": [np.asarray(t["points"], dtype=float) for t in items],
               "inits": [np.asarray(t["init"], dtype=float) for t in items], "grids": None}
    except (KeyError, TypeError) as exc:
        raise EvaluationError(f"{path}: malformed trajectory file ({exc})") from exc
    if "map" in doc:
        m = doc["map"]
        grid = MapGrid(rle_decode(m["driveable_rle"], m["height"], m["width"]),
                       float(m["resolution"]), tuple(m["origin"]))
        out["grids"] = [grid] * len(items)
    return out


def write_trajectory_file(path, trajectories, inits, dt: float, ids=None,
                          model_kind: str = "CTRA") -> None:
    ids = ids or [str(i) for i in range(len(trajectories))]
    doc = {"dt": dt, "model_kind": model_kind, "trajectories": [
        {"id": i, "init": np.asarray(s, float).tolist(), "points": np.asarray(t, float).tolist()}
        for i, s, t in zip(ids, inits, trajectories)]}
    Path(path).write_text(json.dumps(doc))


# ---------------------------------------------------------------- reports

def _order_key(row: MetricRow):
    try:
        return FAMILY_ORDER.index(row.label), row.label
    except ValueError:
        return len(FAMILY_ORDER), row.label


def write_metrics_table(path, rows: list[MetricRow]) -> None:
    if not rows:
        raise EvaluationError("no metric rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "ADE", "FDE", "scenarios", "regime", "motion_model"])
        for r in sorted(rows, key=_order_key):
            w.writerow([r.label, f"{r.ade:.6f}", f"{r.fde:.6f}", r.count, r.regime, r.motion_model])


def read_metrics_table(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        return [MetricRow(r["method"], float(r["ADE"]), float(r["FDE"]), int(r["scenarios"]),
                          r["regime"], r["motion_model"]) for r in csv.DictReader(fh)]


def write_histogram(path, bins: list[tuple[float, int]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTOGRAM_COLUMNS)
        for value, freq in bins:
            w.writerow([f"{value:g}", freq])


def read_histogram(path) -> list[tuple[float, int]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HISTOGRAM_COLUMNS:
            raise EvaluationError(f"{path}: expected columns {HISTOGRAM_COLUMNS}")
        return [(float(r["Value"]), int(r["Frequency"])) for r in reader]


def write_histograms(out_dir, with_delta: FeasibilityReport | None = None,
                     without_delta: FeasibilityReport | None = None) -> list[Path]:
    """histogram_{ax,ay}_{with,without}_delta.csv for the reports that have data."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for tag, rep in (("with", with_delta), ("without", without_delta)):
        if rep is None or len(rep) == 0:
            continue
        for feat in ("ax", "ay"):
            path = out_dir / f"histogram_{feat}_{tag}_delta.csv"
            write_histogram(path, rep.histogram(feat))
            written.append(path)
    if not written:
        log.warning("no feasibility reports; histogram files omitted")
    return written


def report(out_dir, rows: list[MetricRow], with_delta: FeasibilityReport | None = None,
           without_delta: FeasibilityReport | None = None) -> list[Path]:
    """Write metrics.csv and whichever histogram CSVs have data."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_table(out_dir / "metrics.csv", rows)
    return [out_dir / "metrics.csv"] + write_histograms(out_dir, with_delta, without_delta)


def overlay_svg(path, history, prediction, truth=None, size: int = 400, margin: float = 10.0) -> None:
    """Trajectory overlay with history, prediction and ground-truth polylines."""
    series = {"history": np.asarray(history, float), "prediction": np.asarray(prediction, float)}
    if truth is not None:
        series["ground_truth"] = np.asarray(truth, float)
    pts = np.vstack(list(series.values()))
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    scale = (size - 2 * margin) / max(float((hi - lo).max()), 1e-6)

    def fmt(xy):
        sx = margin + (xy[:, 0] - lo[0]) * scale
        sy = size - margin - (xy[:, 1] - lo[1]) * scale
        return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(sx, sy))

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">', f'<rect width="{size}" height="{size}" fill="white"/>']
    for name, xy in series.items():
        lines.append(f'<polyline id="{name}" fill="none" stroke="{SERIES_COLOURS[name]}" '
                     f'stroke-width="2" points="{fmt(xy)}"/>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")
