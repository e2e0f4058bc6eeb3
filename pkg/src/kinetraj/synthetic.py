"""Synthetic scenario generator for desk-scale training.

Every agent is driven by an exact CTRA rollout of a per-step action profile
drawn from one of four maneuver families, so the stored ground-truth
actions reproduce the noiseless positions exactly. Gaussian position noise
is added afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .motion import KinematicState, rollout
from .scenario import MapGrid, Scenario, ScenarioError, make_track

FAMILIES = ("cv", "turn", "accel", "s_curve")


@dataclass
class GeneratorConfig:
    counts: dict = field(default_factory=lambda: {f: 25 for f in FAMILIES})
    noise_std: float = 0.0
    agents_per_scene: int = 3
    frequency_hz: float = 10.0
    history_s: float = 2.0
    future_s: float = 3.0
    speed_range: tuple = (3.0, 15.0)
    turn_rate_range: tuple = (0.1, 0.4)
    accel_range: tuple = (1.0, 3.0)
    s_curve_amplitude: tuple = (0.08, 0.2)
    s_curve_period: tuple = (3.0, 5.0)
    map_resolution: float = 0.5
    map_margin: float = 3.0
    map_padding: float = 40.0
    neighbor_radius: float = 25.0

    def validate(self):
        unknown = set(self.counts) - set(FAMILIES)
        if unknown:
            raise ScenarioError(f"unknown maneuver families {sorted(unknown)}")
        if any(c < 0 for c in self.counts.values()) or sum(self.counts.values()) == 0:
            raise ScenarioError("generator needs a positive number of scenarios")
        if self.noise_std < 0:
            raise ScenarioError("noise level must be nonnegative")
        if self.agents_per_scene < 1:
            raise ScenarioError("need at least one agent per scene")


def _profile(family: str, rng: np.random.Generator, cfg: GeneratorConfig,
             n: int, dt: float) -> tuple[float, np.ndarray]:
    """Initial speed and (n, 2) per-step (a, yaw_rate) for one agent."""
    v0 = rng.uniform(*cfg.speed_range)
    acts = np.zeros((n, 2))
    sign = rng.choice([-1.0, 1.0])
    if family == "turn":
        acts[:, 1] = sign * rng.uniform(*cfg.turn_rate_range)
    elif family == "accel":
        a = rng.uniform(*cfg.accel_range)
        if sign < 0:
            # braking must not reach standstill inside the window
            v0 = rng.uniform(a * n * dt + 1.0, a * n * dt + 6.0)
        acts[:, 0] = sign * a
    elif family == "s_curve":
        amp = sign * rng.uniform(*cfg.s_curve_amplitude)
        period = rng.uniform(*cfg.s_curve_period)
        t0 = rng.uniform(0.5, cfg.history_s + cfg.future_s - period + 0.5)
        t = np.arange(n) * dt
        active = (t >= t0) & (t < t0 + period)
        acts[active, 1] = amp * np.sin(2 * np.pi * (t[active] - t0) / period)
    elif family != "cv":
        raise ScenarioError(f"unknown family {family!r}")
    return v0, acts


def _drivable_map(paths: np.ndarray, cfg: GeneratorConfig) -> MapGrid:
    res = cfg.map_resolution
    lo = paths.min(axis=0) - cfg.map_padding
    hi = paths.max(axis=0) + cfg.map_padding
    width, height = np.ceil((hi - lo) / res).astype(int)
    hits = np.zeros((height, width), bool)
    idx = np.floor((paths - lo) / res).astype(int)
    hits[idx[:, 1], idx[:, 0]] = True
    dist = ndimage.distance_transform_edt(~hits, sampling=res)
    return MapGrid((dist <= cfg.map_margin).astype(np.uint8), res, tuple(lo))


def _scene(index: int, family: str, rng: np.random.Generator, cfg: GeneratorConfig,
           seed: int) -> Scenario:
    freq = cfg.frequency_hz
    dt = 1.0 / freq
    n = int(round((cfg.history_s + cfg.future_s) * freq))
    m = cfg.agents_per_scene

    ego_xy = rng.uniform(-20, 20, size=2)
    ego_yaw = rng.uniform(-np.pi, np.pi)
    inits, profiles = [], []
    for j in range(m):
        fam = family if j == 0 else FAMILIES[rng.integers(len(FAMILIES))]
        v0, acts = _profile(fam, rng, cfg, n, dt)
        if j == 0:
            xy, yaw = ego_xy, ego_yaw
        else:
            xy = ego_xy + rng.uniform(-cfg.neighbor_radius, cfg.neighbor_radius, size=2)
            yaw = ego_yaw + rng.normal(0, 0.3) + (np.pi if rng.random() < 0.3 else 0.0)
        inits.append([xy[0], xy[1], yaw, v0])
        profiles.append(acts)

    init = np.array(inits)
    acts = np.stack(profiles)
    start = KinematicState(*(torch.as_tensor(init[:, i]) for i in range(4)))
    # row k of the profile drives step k-1 -> k; row 0 is only a placeholder
    future = rollout(start, torch.as_tensor(acts[:, 1:]), dt, "CTRA").numpy()
    clean = np.concatenate([init[:, None, :2], future], axis=1)
    noisy = clean + rng.normal(0.0, cfg.noise_std, size=clean.shape) if cfg.noise_std else clean

    tracks = []
    for j in range(m):
        true = acts[j].copy()
        true[0] = true[1]
        tracks.append(make_track(f"{j}", "ego" if j == 0 else "agent", np.arange(n),
                                 noisy[j], n, freq, true_actions=true))
    grid = _drivable_map(clean.reshape(-1, 2), cfg)
    split = int(round(cfg.history_s * freq))
    return Scenario(f"synth-{seed}-{index:05d}-{family}", freq, tuple(tracks), 0, grid, split)


def generate_synthetic(config: GeneratorConfig, seed: int) -> list[Scenario]:
    """Deterministic list of scenarios, grouped by family in ``FAMILIES`` order."""
    config.validate()
    rng = np.random.default_rng(seed)
    out = []
    for family in FAMILIES:
        for _ in range(config.counts.get(family, 0)):
            out.append(_scene(len(out), family, rng, config, seed))
    return out
