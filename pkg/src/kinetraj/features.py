"""Scenario windows -> padded tensors for the learned components.

A *window* is a world-frame scenario cut to the input history (its last
step is the anchor). Samples are expressed in the window's ego frame on a
square raster centred on the ego.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .raster import build_penalty_field
from .scenario import (EgoFrame, Scenario, history_view, observed_tracks_at, resample_map,
                       to_ego_frame)

FEATURE_DIM = 8
POS_SCALE = 10.0
VEL_SCALE = 10.0
ACC_SCALE = 3.0
YAW_RATE_SCALE = 0.5


@dataclass
class Sample:
    scenario_id: str
    track_ids: list
    track_index: list          # indices into the source scenario's tracks
    history: np.ndarray        # (M, T, F)
    history_mask: np.ndarray   # (M, T)
    raster: np.ndarray         # (H, W)
    init: np.ndarray           # (M, 6) x, y, yaw, v, vx, vy in the ego frame
    last_attributes: np.ndarray  # (M, 5) attributes at the anchor
    frame: EgoFrame
    dt: float
    map_resolution: float
    map_origin: tuple
    future: np.ndarray | None = None       # (M, K, 2)
    future_mask: np.ndarray | None = None  # (M, K)
    truth_actions: np.ndarray | None = None  # (M, K, 2)
    penalty: np.ndarray | None = None      # (Hl, Wl) on the loss grid
    loss_map: np.ndarray | None = None     # (Hl, Wl) drivable mask on the loss grid
    loss_origin: tuple | None = None


def track_features(positions: np.ndarray, attributes: np.ndarray) -> np.ndarray:
    vx, vy, a, yaw, yaw_rate = attributes.T
    return np.column_stack([
        positions / POS_SCALE, vx / VEL_SCALE, vy / VEL_SCALE, a / ACC_SCALE,
        np.sin(yaw), np.cos(yaw), yaw_rate / YAW_RATE_SCALE])


def make_window(scenario: Scenario, anchor: int, history_steps: int) -> Scenario:
    """World-frame window of ``history_steps`` ending at step ``anchor - 1``."""
    if anchor - history_steps < 0:
        raise ValueError(f"window [{anchor - history_steps}, {anchor}) starts before the data")
    return history_view(scenario, anchor - history_steps, anchor)


def sample_from_window(window: Scenario, source: Scenario | None = None, anchor: int | None = None,
                       horizon: int = 30, raster_size: int = 128, resolution: float = 0.5,
                       max_agents: int = 16, init_override: dict | None = None,
                       with_penalty: bool = False, agents: list | None = None,
                       loss_raster_size: int | None = None) -> Sample:
    """Build a model sample from a world-frame window.

    ``source``/``anchor`` supply ground truth for the ``horizon`` steps after
    the window when available. ``init_override`` maps track index to a world
    frame (x, y, yaw, v, vx, vy) state that replaces the derived one.
    ``agents`` pins the predicted track indices and their row order.
    With ``with_penalty`` the sample also carries the drivable mask and its
    penalty field on a loss grid of ``loss_raster_size`` pixels (default
    twice the input raster), wide enough to hold the prediction horizon.
    """
    ego_view = to_ego_frame(window, raster_size, resolution)
    frame = ego_view.frame
    last = window.num_steps - 1
    if agents is None:
        agents = observed_tracks_at(ego_view, last)
        ego_pos = ego_view.ego.positions[last]
        others = sorted(agents[1:], key=lambda i: float(
            np.hypot(*(ego_view.tracks[i].positions[last] - ego_pos))))
        agents = [agents[0]] + others[:max_agents - 1]

    hist, hmask, init, last_attr = [], [], [], []
    for i in agents:
        tr = ego_view.tracks[i]
        feats = track_features(tr.positions, tr.attributes)
        feats[~tr.observed_mask] = 0.0
        hist.append(feats)
        hmask.append(tr.observed_mask)
        attr = tr.attributes[last]
        state = np.array([*tr.positions[last], attr[3], np.hypot(attr[0], attr[1]), attr[0], attr[1]])
        if init_override and i in init_override:
            w = np.asarray(init_override[i], dtype=float)
            xy = frame.to_ego(w[:2])
            vxy = frame.rotate_to_ego(w[4:6])
            yaw = np.arctan2(np.sin(w[2] - frame.heading), np.cos(w[2] - frame.heading))
            state = np.array([xy[0], xy[1], yaw, w[3], vxy[0], vxy[1]])
        init.append(state)
        last_attr.append(attr)

    sample = Sample(
        scenario_id=window.scenario_id,
        track_ids=[window.tracks[i].track_id for i in agents],
        track_index=list(agents),
        history=np.stack(hist),
        history_mask=np.stack(hmask),
        raster=ego_view.map.driveable.astype(np.float32),
        init=np.stack(init),
        last_attributes=np.stack(last_attr),
        frame=frame,
        dt=window.dt,
        map_resolution=ego_view.map.resolution,
        map_origin=ego_view.map.origin,
    )
    if with_penalty:
        size = loss_raster_size or 2 * raster_size
        loss_grid = resample_map(window.map, frame, size, resolution)
        sample.loss_map = loss_grid.driveable
        sample.loss_origin = loss_grid.origin
        sample.penalty = build_penalty_field(loss_grid).values.astype(np.float32) \
            if loss_grid.driveable.any() else np.zeros((size, size), np.float32)
    if source is not None and anchor is not None:
        stop = min(anchor + horizon, source.num_steps)
        fut = np.zeros((len(agents), horizon, 2))
        fmask = np.zeros((len(agents), horizon), bool)
        acts = None
        for row, i in enumerate(agents):
            tr = source.tracks[i]
            fut[row, :stop - anchor] = frame.to_ego(tr.positions[anchor:stop])
            fmask[row, :stop - anchor] = tr.observed_mask[anchor:stop]
            if tr.true_actions is not None:
                if acts is None:
                    acts = np.zeros((len(agents), horizon, 2))
                acts[row, :stop - anchor] = tr.true_actions[anchor:stop]
        sample.future, sample.future_mask, sample.truth_actions = fut, fmask, acts
    return sample


def build_sample(scenario: Scenario, anchor: int | None = None, horizon: int = 30,
                 history_steps: int | None = None, **kwargs) -> Sample:
    """Sample whose history ends at ``anchor - 1`` (default: the split)."""
    anchor = scenario.split_index if anchor is None else anchor
    history_steps = history_steps or scenario.split_index
    window = make_window(scenario, anchor, history_steps)
    return sample_from_window(window, scenario, anchor, horizon, **kwargs)


def collate(samples: list[Sample], dtype=torch.float32) -> dict:
    """Pad samples to a common agent count; agent 0 of each sample is the ego."""
    b = len(samples)
    m = max(len(s.track_ids) for s in samples)
    t = max(s.history.shape[1] for s in samples)
    hist = np.zeros((b, m, t, FEATURE_DIM))
    hmask = np.zeros((b, m, t), bool)
    amask = np.zeros((b, m), bool)
    init = np.zeros((b, m, 6))
    last = np.zeros((b, m, 5))
    for k, s in enumerate(samples):
        n, tt = s.history.shape[:2]
        hist[k, :n, :tt] = s.history
        hmask[k, :n, :tt] = s.history_mask
        amask[k, :n] = True
        init[k, :n] = s.init
        last[k, :n] = s.last_attributes
    batch = {
        "history": torch.as_tensor(hist, dtype=dtype),
        "history_mask": torch.as_tensor(hmask),
        "agent_mask": torch.as_tensor(amask),
        "init": torch.as_tensor(init, dtype=dtype),
        "last_attributes": torch.as_tensor(last, dtype=dtype),
        "raster": torch.as_tensor(np.stack([s.raster for s in samples])[:, None], dtype=dtype),
        "dt": samples[0].dt,
        "map_resolution": samples[0].map_resolution,
        "map_origin": torch.as_tensor(np.array([s.map_origin for s in samples]), dtype=dtype),
    }
    if all(s.future is not None for s in samples):
        k_steps = samples[0].future.shape[1]
        fut = np.zeros((b, m, k_steps, 2))
        fmask = np.zeros((b, m, k_steps), bool)
        for k, s in enumerate(samples):
            n = len(s.track_ids)
            fut[k, :n] = s.future
            fmask[k, :n] = s.future_mask
        batch["future"] = torch.as_tensor(fut, dtype=dtype)
        batch["future_mask"] = torch.as_tensor(fmask) & batch["agent_mask"][..., None]
    if all(s.penalty is not None for s in samples):
        batch["penalty"] = torch.as_tensor(np.stack([s.penalty for s in samples]), dtype=dtype)
        batch["loss_origin"] = torch.as_tensor(np.array([s.loss_origin for s in samples]),
                                               dtype=dtype)
    return batch


def with_dtype(batch: dict, dtype) -> dict:
    return {k: (v.to(dtype) if isinstance(v, torch.Tensor) and v.is_floating_point() else v)
            for k, v in batch.items()}


def replace_tracks(window: Scenario, updates: dict) -> Scenario:
    """Window copy with track ``i`` given new (positions, attributes, mask)."""
    tracks = list(window.tracks)
    for i, (pos, attr, mask) in updates.items():
        tracks[i] = replace(tracks[i], positions=pos, attributes=attr, observed_mask=mask)
    return replace(window, tracks=tuple(tracks))
