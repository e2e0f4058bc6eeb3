"""Training and inference in the single-shot (HSS) and multi-step (HMS) regimes."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import motion
from .evaluation import ade, fde
from .features import (Sample, collate, make_window, replace_tracks, sample_from_window,
                       build_sample)
from .model import (HybridModel, ModelConfig, model_config_dict, save_checkpoint)
from .objectives import (BoundSpec, delta_loss_exact, delta_loss_surrogate, mse_loss,
                         offroad_exact, offroad_surrogate, total_loss)
from .scenario import MapGrid, Scenario, derive_attributes, wrap_angle

log = logging.getLogger(__name__)

REGIMES = ("HSS", "HMS")
HMS_TRAIN_MODES = ("per_cycle", "full_horizon")
METRIC_COLUMNS = ("epoch", "L_MSE", "L_delta_exact", "L_offroad_exact", "val_ADE", "val_FDE",
                  "total")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    regime: str = "HSS"
    motion_model: str = "CTRA"
    batch_size: int = 64
    epochs: int = 30
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    bounds_lower: tuple | None = None
    bounds_upper: tuple | None = None
    lambda_delta: float = 1.0
    lambda_offroad: float = 1.0
    bounded_head: bool = True
    grad_clip: float = 5.0
    hms_train_mode: str = "per_cycle"
    offroad_ego_only: bool = False
    mse_ego_only: bool = False
    history_s: float = 2.0
    future_s: float = 3.0
    cycle_s: float = 1.0
    raster_size: int = 128
    loss_raster_size: int = 256
    resolution: float = 0.5
    max_agents: int = 16
    d_model: int = 128
    heads: int = 4
    ff_dim: int = 256
    encoder_layers: int = 2
    merge_layers: int = 2
    map_channels: tuple = (16, 32, 64, 128)
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self.motion_model not in ("CV", "CTRA", "none"):
            raise ValueError("motion_model must be CV, CTRA or none")
        if self.hms_train_mode not in HMS_TRAIN_MODES:
            raise ValueError(f"hms_train_mode must be one of {HMS_TRAIN_MODES}")
        if self.batch_size <= 0 or self.epochs <= 0 or not self.learning_rate > 0:
            raise ValueError("batch_size, epochs and learning_rate must be positive")
        if self.bounds_lower is None or self.bounds_upper is None:
            kind = "CV" if self.motion_model == "CV" else "CTRA"
            bounds = BoundSpec.default(kind)
            self.bounds_lower = tuple(bounds.lower.tolist())
            self.bounds_upper = tuple(bounds.upper.tolist())
        self.bounds_lower = tuple(float(v) for v in self.bounds_lower)
        self.bounds_upper = tuple(float(v) for v in self.bounds_upper)
        self.map_channels = tuple(int(c) for c in self.map_channels)
        BoundSpec(self.bounds_lower, self.bounds_upper)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**values)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("bounds_lower", "bounds_upper", "map_channels"):
            d[k] = list(d[k])
        return d

    @property
    def bounds(self) -> BoundSpec:
        return BoundSpec(self.bounds_lower, self.bounds_upper)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            motion_model=self.motion_model, d_model=self.d_model, heads=self.heads,
            ff_dim=self.ff_dim, encoder_layers=self.encoder_layers,
            merge_layers=self.merge_layers, map_channels=self.map_channels,
            raster_size=self.raster_size, bounded_head=self.bounded_head,
            bounds_lower=self.bounds_lower, bounds_upper=self.bounds_upper)

    def steps(self, frequency_hz: float) -> dict:
        hist = int(round(self.history_s * frequency_hz))
        total = int(round(self.future_s * frequency_hz))
        cycle = int(round(self.cycle_s * frequency_hz))
        if self.regime == "HMS" and total % cycle:
            raise ValueError("prediction horizon must be a whole number of HMS cycles")
        return {"history": hist, "total": total, "cycle": cycle,
                "cycles": total // cycle if self.regime == "HMS" else 1}

    def checkpoint_config(self) -> dict:
        return {"train": self.to_dict(), "model": model_config_dict(self.model_config())}


@dataclass
class Segment:
    """One decoded stretch in the ego frame of the window it was decoded in."""
    init: np.ndarray              # (M, 6)
    actions: np.ndarray | None    # (M, K, 2)
    trajectory: np.ndarray        # (M, K, 2)
    frame: object


@dataclass
class Prediction:
    scenario_id: str
    track_ids: list
    track_index: list
    trajectory: np.ndarray        # (M, K, 2) in the scenario's ego frame at the split
    world_trajectory: np.ndarray  # (M, K, 2)
    actions: np.ndarray | None    # (M, K, 2) concatenated over cycles
    model_kind: str
    regime: str
    frame: object
    segments: list = field(default_factory=list)
    windows: list = field(default_factory=list)   # per-cycle (M, T, 2) world input positions

    @property
    def ego(self) -> np.ndarray:
        return self.trajectory[0]


def _model_dtype(model) -> torch.dtype:
    for p in getattr(model, "parameters", lambda: [])():
        return p.dtype
    return torch.float64


def _kind(model) -> str:
    return model.config.motion_model


def _decode(model, samples: list[Sample], steps: int) -> list[Segment]:
    """Run the network, then roll the emitted actions out in float64 so the
    returned trajectory is exactly rollout(init, actions)."""
    dtype = _model_dtype(model)
    batch = collate(samples, dtype)
    if hasattr(model, "eval"):
        model.eval()
    with torch.no_grad():
        out = model(batch, steps)
    kind = _kind(model)
    segments = []
    for k, s in enumerate(samples):
        n = len(s.track_ids)
        init = s.init.copy()
        if kind == "none":
            traj = out["trajectory"][k, :n].detach().double().numpy()
            segments.append(Segment(init, None, traj, s.frame))
            continue
        actions = out["actions"][k, :n].detach().double().numpy()
        traj = rollout_segment(init, actions, s.dt, kind)
        segments.append(Segment(init, actions, traj, s.frame))
    return segments


def rollout_segment(init: np.ndarray, actions: np.ndarray, dt: float, kind: str,
                    return_states: bool = False):
    state = motion.KinematicState.from_array(init)
    traj, states = motion.rollout(state, torch.as_tensor(actions, dtype=torch.float64), dt, kind,
                                  return_states=True)
    if return_states:
        return traj.numpy(), motion.KinematicState.stack(states).to_array().swapaxes(0, 1)
    return traj.numpy()


def _predicted_attributes(segment: Segment, kind: str, dt: float, window_pos: np.ndarray,
                          world_pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-frame attributes of the predicted steps and the final world state."""
    frame = segment.frame
    m, k = segment.trajectory.shape[:2]
    attrs = np.zeros((m, k, 5))
    finals = np.zeros((m, 6))
    if kind == "none":
        for i in range(m):
            both = np.concatenate([window_pos[i], world_pred[i]])
            attrs[i] = derive_attributes(both, dt)[-k:]
            a = attrs[i, -1]
            finals[i] = [*world_pred[i, -1], a[3], np.hypot(a[0], a[1]), a[0], a[1]]
        return attrs, finals
    _, states = rollout_segment(segment.init, segment.actions, dt, kind, return_states=True)
    # states: (M, K, 6) x, y, yaw, v, vx, vy in the segment frame
    yaw_w = wrap_angle(states[..., 2] + frame.heading)
    vxy_w = frame.rotate_to_world(states[..., 4:6])
    attrs[..., 0:2] = vxy_w
    attrs[..., 3] = yaw_w
    if kind == "CTRA":
        attrs[..., 2] = segment.actions[..., 0]
        attrs[..., 4] = segment.actions[..., 1]
    else:
        speed = np.concatenate([segment.init[:, None, 3], states[..., 3]], axis=1)
        attrs[..., 2] = np.diff(speed, axis=1) / dt
        yaw = np.unwrap(np.concatenate([segment.init[:, None, 2], states[..., 2]], axis=1), axis=1)
        attrs[..., 4] = np.diff(yaw, axis=1) / dt
    finals[:, 0:2] = world_pred[:, -1]
    finals[:, 2] = yaw_w[:, -1]
    finals[:, 3] = states[:, -1, 3]
    finals[:, 4:6] = vxy_w[:, -1]
    return attrs, finals


def predict(model, scenarios: list[Scenario], config: TrainConfig,
            batch_size: int = 64) -> list[Prediction]:
    """Batched HSS or HMS inference for every scenario."""
    out = []
    for start in range(0, len(scenarios), batch_size):
        chunk = scenarios[start:start + batch_size]
        if config.regime == "HSS":
            out.extend(_predict_hss(model, chunk, config))
        else:
            out.extend(_predict_hms(model, chunk, config))
    return out


def _sample_kwargs(config: TrainConfig) -> dict:
    return {"raster_size": config.raster_size, "resolution": config.resolution,
            "max_agents": config.max_agents, "loss_raster_size": config.loss_raster_size}


def _predict_hss(model, scenarios, config):
    preds = []
    samples = []
    for s in scenarios:
        st = config.steps(s.frequency_hz)
        samples.append(sample_from_window(make_window(s, s.split_index, st["history"]),
                                          horizon=st["total"], **_sample_kwargs(config)))
    segments = _decode(model, samples, config.steps(scenarios[0].frequency_hz)["total"])
    for s, smp, seg in zip(scenarios, samples, segments):
        world = seg.frame.to_world(seg.trajectory)
        preds.append(Prediction(s.scenario_id, smp.track_ids, smp.track_index, seg.trajectory,
                                world, seg.actions, _kind(model), "HSS", seg.frame, [seg]))
    return preds


def _predict_hms(model, scenarios, config):
    kind = _kind(model)
    st = config.steps(scenarios[0].frequency_hz)
    cycle, hist = st["cycle"], st["history"]
    windows = [make_window(s, s.split_index, hist) for s in scenarios]
    overrides: list[dict] = [{} for _ in scenarios]
    agents = None
    world_parts = [[] for _ in scenarios]
    action_parts = [[] for _ in scenarios]
    seg_log = [[] for _ in scenarios]
    window_log = [[] for _ in scenarios]
    first_frames = None

    for c in range(st["cycles"]):
        samples = [sample_from_window(w, horizon=cycle, init_override=o,
                                      agents=None if agents is None else agents[j],
                                      **_sample_kwargs(config))
                   for j, (w, o) in enumerate(zip(windows, overrides))]
        if agents is None:
            agents = [smp.track_index for smp in samples]
            first_frames = [smp.frame for smp in samples]
        segments = _decode(model, samples, cycle)
        new_windows = []
        for j, (w, smp, seg) in enumerate(zip(windows, samples, segments)):
            win_pos = np.stack([w.tracks[i].positions for i in smp.track_index])
            window_log[j].append(win_pos)
            world_pred = seg.frame.to_world(seg.trajectory)
            attrs, finals = _predicted_attributes(seg, kind, w.dt, win_pos, world_pred)
            world_parts[j].append(world_pred)
            if seg.actions is not None:
                action_parts[j].append(seg.actions)
            seg_log[j].append(seg)
            # drop the oldest cycle of the window and append the prediction
            updates = {}
            predicted = set(smp.track_index)
            for i, tr in enumerate(w.tracks):
                if i in predicted:
                    row = smp.track_index.index(i)
                    pos = np.concatenate([tr.positions[cycle:], world_pred[row]])
                    att = np.concatenate([tr.attributes[cycle:], attrs[row]])
                    msk = np.concatenate([tr.observed_mask[cycle:], np.ones(cycle, bool)])
                else:
                    pos = np.concatenate([tr.positions[cycle:],
                                          np.repeat(tr.positions[-1:], cycle, axis=0)])
                    att = np.concatenate([tr.attributes[cycle:],
                                          np.repeat(tr.attributes[-1:], cycle, axis=0)])
                    msk = np.concatenate([tr.observed_mask[cycle:], np.zeros(cycle, bool)])
                updates[i] = (pos, att, msk)
            new_windows.append(replace_tracks(w, updates))
            if kind != "none":
                overrides[j] = {i: finals[row] for row, i in enumerate(smp.track_index)}
        windows = new_windows

    preds = []
    for j, s in enumerate(scenarios):
        world = np.concatenate(world_parts[j], axis=1)
        frame = first_frames[j]
        acts = np.concatenate(action_parts[j], axis=1) if action_parts[j] else None
        preds.append(Prediction(s.scenario_id, [s.tracks[i].track_id for i in agents[j]],
                                agents[j], frame.to_ego(world), world, acts, kind, "HMS", frame,
                                seg_log[j], window_log[j]))
    return preds


def predict_hss(model, scenario: Scenario, config: TrainConfig | None = None) -> Prediction:
    config = config or TrainConfig(regime="HSS", motion_model=_kind(model))
    return _predict_hss(model, [scenario], dataclasses.replace(config, regime="HSS"))[0]


def predict_hms(model, scenario: Scenario, config: TrainConfig | None = None) -> Prediction:
    config = config or TrainConfig(regime="HMS", motion_model=_kind(model))
    return _predict_hms(model, [scenario], dataclasses.replace(config, regime="HMS"))[0]


def cv_baseline(scenario: Scenario, window: int = 3, horizon: int | None = None,
                track: int | None = None) -> np.ndarray:
    """Hold the last-history velocity (averaged over ``window`` steps) constant.

    Returns world-frame positions (horizon, 2) for ``track`` (default ego).
    """
    tr = scenario.tracks[scenario.ego_index if track is None else track]
    anchor = scenario.anchor_index
    seen = np.flatnonzero(tr.observed_mask[:anchor + 1])
    if len(seen) < 2 or seen[-1] != anchor:
        raise ValueError(f"{scenario.scenario_id}: CV baseline needs >= 2 history points "
                         "ending at the anchor")
    start = seen[max(0, np.searchsorted(seen, anchor - window))]
    vel = (tr.positions[anchor] - tr.positions[start]) / ((anchor - start) * scenario.dt)
    horizon = horizon or int(round(3.0 * scenario.frequency_hz))
    state = motion.KinematicState(*tr.positions[anchor], 0.0, 0.0, 0.0, 0.0)
    actions = torch.as_tensor(np.tile(vel, (horizon, 1)))
    return motion.rollout(state, actions, scenario.dt, "CV").numpy()


def cv_baseline_metrics(scenarios: list[Scenario], window: int = 3) -> tuple[float, float]:
    """Mean ego ADE and FDE of the CV baseline over each scenario's full future."""
    ades, fdes = [], []
    for s in scenarios:
        pred = cv_baseline(s, window, s.num_steps - s.split_index)
        truth = s.ego.positions[s.split_index:]
        mask = s.ego.observed_mask[s.split_index:]
        ades.append(ade(pred, truth, mask))
        fdes.append(fde(pred, truth, mask))
    return float(np.mean(ades)), float(np.mean(fdes))


def ego_truth(scenario: Scenario, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    tr = scenario.ego
    a = scenario.split_index
    return tr.positions[a:a + horizon], tr.observed_mask[a:a + horizon]


def displacement_metrics(preds: list[Prediction], scenarios: list[Scenario],
                         all_agents: bool = False) -> tuple[float, float]:
    ades, fdes = [], []
    for p, s in zip(preds, scenarios):
        rows = range(len(p.track_index)) if all_agents else [0]
        for r in rows:
            tr = s.tracks[p.track_index[r]]
            k = p.world_trajectory.shape[1]
            truth = tr.positions[s.split_index:s.split_index + k]
            mask = tr.observed_mask[s.split_index:s.split_index + k]
            if not mask.any() or len(truth) < k:
                continue
            ades.append(ade(p.world_trajectory[r], truth, mask))
            fdes.append(fde(p.world_trajectory[r], truth, mask))
    return float(np.mean(ades)), float(np.mean(fdes))


# ---------------------------------------------------------------- training

def training_samples(scenarios: list[Scenario], config: TrainConfig) -> tuple[list[Sample], int]:
    """Samples with ground truth and penalty fields, plus the decode length."""
    out = []
    steps = None
    for s in scenarios:
        st = config.steps(s.frequency_hz)
        kw = dict(history_steps=st["history"], with_penalty=True, **_sample_kwargs(config))
        if config.regime == "HMS" and config.hms_train_mode == "per_cycle":
            steps = st["cycle"]
            for c in range(st["cycles"]):
                out.append(build_sample(s, s.split_index + c * st["cycle"], st["cycle"], **kw))
        else:
            steps = st["total"]
            out.append(build_sample(s, s.split_index, st["total"], **kw))
    return out, steps


def batch_losses(model: HybridModel, batch: dict, samples: list[Sample], steps: int,
                 config: TrainConfig):
    out = model(batch, steps)
    traj = out["trajectory"]
    fmask = batch["future_mask"]
    if config.mse_ego_only:
        fmask = fmask.clone()
        fmask[:, 1:] = False
    mse = mse_loss(traj, batch["future"], fmask)
    amask = batch["agent_mask"]
    bounds = config.bounds
    step_mask = amask[..., None].expand(traj.shape[:-1])
    # surrogates are averaged per agent-step so they share the scale of the MSE
    n_steps = step_mask.sum().clamp(min=1)
    delta_s = torch.zeros((), dtype=traj.dtype)
    delta_x = 0
    if "actions" in out:
        delta_s = delta_loss_surrogate(out["actions"], bounds, 1.0, step_mask) / n_steps
        delta_x = delta_loss_exact(out["actions"].detach()[amask], bounds)
    pmask = step_mask.clone()
    if config.offroad_ego_only:
        pmask[:, 1:] = False
    off_s = offroad_surrogate(traj, batch["penalty"], batch["map_resolution"], batch["loss_origin"],
                              1.0, pmask) / pmask.sum().clamp(min=1)
    off_x = 0
    trajs = traj.detach().double().numpy()
    for k, smp in enumerate(samples):
        grid = MapGrid(smp.loss_map, smp.map_resolution, smp.loss_origin)
        n = len(smp.track_ids)
        off_x += offroad_exact(trajs[k, :n], grid, config.offroad_ego_only)
    lam_d = config.lambda_delta if "actions" in out else 0.0
    return total_loss(mse, delta_s, off_s, lam_d, config.lambda_offroad, delta_x, off_x)


@dataclass
class TrainResult:
    model: HybridModel
    config: TrainConfig
    history: list
    best_epoch: int
    best_val_ade: float


def _set_threads(threads: int | None):
    if threads:
        torch.set_num_threads(threads)


def train(config: TrainConfig, train_scenarios: list[Scenario], val_scenarios: list[Scenario],
          out_dir=None, threads: int | None = None) -> TrainResult:
    """Mini-batch Adam training; keeps the parameters with the best validation ego ADE."""
    if not train_scenarios or not val_scenarios:
        raise ValueError("training and validation sets must be nonempty")
    _set_threads(threads)
    torch.manual_seed(config.seed)
    model = HybridModel(config.model_config())
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                           betas=(config.beta1, config.beta2), eps=config.adam_eps)
    samples, steps = training_samples(train_scenarios, config)
    gen = torch.Generator().manual_seed(config.seed)
    ckpt_config = config.checkpoint_config()
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    history, best, best_state, best_epoch = [], math.inf, None, 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = torch.randperm(len(samples), generator=gen).tolist()
        sums = {"L_MSE": 0.0, "L_delta_exact": 0, "L_offroad_exact": 0, "total": 0.0}
        batches = 0
        for start in range(0, len(order), config.batch_size):
            chunk = [samples[i] for i in order[start:start + config.batch_size]]
            batch = collate(chunk)
            report = batch_losses(model, batch, chunk, steps, config)
            if not torch.isfinite(report.total):
                raise DivergenceError(f"non-finite loss at epoch {epoch}: {report.as_row()}")
            opt.zero_grad()
            report.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            row = report.as_row()
            sums["L_MSE"] += row["L_MSE"]
            sums["total"] += row["total"]
            sums["L_delta_exact"] += row["L_delta_exact"]
            sums["L_offroad_exact"] += row["L_offroad_exact"]
            batches += 1
        preds = predict(model, val_scenarios, config)
        val_ade, val_fde = displacement_metrics(preds, val_scenarios)
        entry = {"epoch": epoch, "L_MSE": sums["L_MSE"] / batches,
                 "L_delta_exact": sums["L_delta_exact"], "L_offroad_exact": sums["L_offroad_exact"],
                 "val_ADE": val_ade, "val_FDE": val_fde, "total": sums["total"] / batches}
        history.append(entry)
        log.info("epoch %d  mse %.4f  delta %d  offroad %d  val ADE %.3f FDE %.3f", epoch,
                 entry["L_MSE"], entry["L_delta_exact"], entry["L_offroad_exact"], val_ade, val_fde)
        if val_ade < best:
            best, best_epoch = val_ade, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if out_dir:
                save_checkpoint(out_dir / "best.ckpt", model, ckpt_config, opt,
                                {"epoch": epoch, "val_ADE": val_ade, "val_FDE": val_fde})
        if out_dir:
            write_metrics(out_dir / "metrics.csv", history)
    if out_dir:
        save_checkpoint(out_dir / "last.ckpt", model, ckpt_config, opt, {"epoch": config.epochs})
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, config, history, best_epoch, best)


def write_metrics(path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in METRIC_COLUMNS})
