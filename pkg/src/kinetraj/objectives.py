"""Composite training objective: trajectory MSE, action-bound and offroad terms.

The bound and offroad terms each come in two forms: an exact count used
for reporting, and a hinge/distance surrogate that carries gradient and
is zero exactly where the count is zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .motion import ActionSeries
from .raster import offroad_count, rasterize, sample_penalty
from .scenario import MapGrid

DEFAULT_BOUNDS = {
    "CTRA": ((-8.0, -0.7), (8.0, 0.7)),
    "CV": ((-30.0, -10.0), (40.0, 10.0)),
}


class LossError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BoundSpec:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise LossError("bounds must be equal-length vectors")
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise LossError("bounds must be finite")
        if not (lo < hi).all():
            raise LossError(f"lower bounds {lo} must be below upper bounds {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def default(cls, model_kind: str) -> "BoundSpec":
        lo, hi = DEFAULT_BOUNDS[model_kind]
        return cls(lo, hi)

    def inside(self, values) -> np.ndarray:
        """Per-step flag: all features within [lower, upper]."""
        vals = np.asarray(values, dtype=float)
        return ((vals >= self.lower) & (vals <= self.upper)).all(axis=-1)

    def float32_limits(self) -> tuple[np.ndarray, np.ndarray]:
        """float32 limits lying inside the float64 bounds (rounded inward)."""
        lo = self.lower.astype(np.float32)
        hi = self.upper.astype(np.float32)
        lo = np.where(lo.astype(float) < self.lower, np.nextafter(lo, np.float32(np.inf)), lo)
        hi = np.where(hi.astype(float) > self.upper, np.nextafter(hi, np.float32(-np.inf)), hi)
        return lo, hi


def _values(actions) -> np.ndarray:
    if isinstance(actions, ActionSeries):
        return actions.values
    if isinstance(actions, torch.Tensor):
        return actions.detach().cpu().double().numpy()
    if isinstance(actions, (list, tuple)):
        parts = [_values(a).reshape(-1, 2) for a in actions]
        return np.concatenate(parts) if parts else np.zeros((0, 2))
    return np.asarray(actions, dtype=float)


def delta_loss_exact(actions, bounds: BoundSpec, mask=None) -> int:
    """Number of (agent, step) pairs with any feature outside the bounds."""
    vals = _values(actions)
    if vals.size == 0:
        return 0
    bad = ~bounds.inside(vals)
    if mask is not None:
        bad &= np.asarray(mask, bool)
    return int(bad.sum())


def delta_loss_surrogate(actions: torch.Tensor, bounds: BoundSpec, weight: float = 1.0,
                         mask: torch.Tensor | None = None) -> torch.Tensor:
    """weight * sum of hinge distances outside [lower, upper]."""
    lo = torch.as_tensor(bounds.lower, dtype=actions.dtype)
    hi = torch.as_tensor(bounds.upper, dtype=actions.dtype)
    hinge = torch.relu(actions - hi) + torch.relu(lo - actions)
    if mask is not None:
        hinge = hinge * mask.unsqueeze(-1).to(hinge.dtype)
    return weight * hinge.sum()


def mse_loss(pred: torch.Tensor, truth: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared Euclidean displacement over valid (agent, step) pairs."""
    pred = torch.as_tensor(pred)
    truth = torch.as_tensor(truth, dtype=pred.dtype)
    if pred.shape != truth.shape:
        raise LossError(f"shape mismatch {tuple(pred.shape)} vs {tuple(truth.shape)}")
    sq = ((pred - truth) ** 2).sum(dim=-1)
    if mask is None:
        mask = torch.ones_like(sq, dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    count = mask.sum()
    if count == 0:
        raise LossError("no valid ground-truth steps")
    return (sq * mask).sum() / count


def offroad_exact(trajectories, grid: MapGrid, ego_only: bool = False) -> int:
    """Offroad pixel count of the union raster of the predicted agents.

    ``trajectories`` is (M, K, 2) with the ego first, or a single (K, 2).
    """
    traj = np.asarray(trajectories, dtype=float)
    if traj.ndim == 3 and ego_only:
        traj = traj[:1]
    return offroad_count(rasterize(traj.reshape(-1, 2), grid), grid)


def offroad_surrogate(trajectories: torch.Tensor, field_values: torch.Tensor, resolution: float,
                      origin, weight: float = 1.0, mask: torch.Tensor | None = None) -> torch.Tensor:
    """weight * sum of penalty-field samples at the predicted points."""
    pen = sample_penalty(field_values, trajectories, resolution, origin)
    if mask is not None:
        pen = pen * mask.to(pen.dtype)
    return weight * pen.sum()


def offroad_loss(trajectories, grid: MapGrid, field, mode: str = "exact",
                 weight: float = 1.0, ego_only: bool = False):
    if mode == "exact":
        return offroad_exact(_values_xy(trajectories), grid, ego_only)
    if mode == "surrogate":
        traj = torch.as_tensor(trajectories)
        if ego_only and traj.ndim == 3:
            traj = traj[:1]
        return offroad_surrogate(traj, torch.as_tensor(field.values), field.resolution,
                                 field.origin, weight)
    raise LossError(f"unknown offroad mode {mode!r}")


def _values_xy(traj):
    if isinstance(traj, torch.Tensor):
        return traj.detach().cpu().double().numpy()
    return np.asarray(traj, dtype=float)


@dataclass
class LossReport:
    mse: float | torch.Tensor
    delta_exact: int = 0
    delta_surrogate: float | torch.Tensor = 0.0
    offroad_exact: int = 0
    offroad_surrogate: float | torch.Tensor = 0.0
    total: float | torch.Tensor = 0.0
    per_agent: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        def f(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return {"L_MSE": f(self.mse), "L_delta_exact": int(self.delta_exact),
                "L_delta_surrogate": f(self.delta_surrogate),
                "L_offroad_exact": int(self.offroad_exact),
                "L_offroad_surrogate": f(self.offroad_surrogate), "total": f(self.total)}


def total_loss(mse, delta_surrogate=0.0, offroad_surrogate=0.0, lambda_delta: float = 1.0,
               lambda_offroad: float = 1.0, delta_exact: int = 0, offroad_exact: int = 0,
               per_agent: dict | None = None) -> LossReport:
    """Training total = MSE + lambda_delta * delta + lambda_offroad * offroad.

    The surrogate arguments are unweighted; the report stores them weighted.
    """
    d = lambda_delta * delta_surrogate
    o = lambda_offroad * offroad_surrogate
    return LossReport(mse, delta_exact, d, offroad_exact, o, mse + d + o, per_agent or {})
