"""Constant-velocity and CTRA kinematic motion models.

The CTRA update is the usual closed form (Blackman-style), evaluated in a
rearranged but algebraically identical shape: with ``d = yaw_rate * dt`` and
``m = yaw + d / 2``

    dx = v*dt*cos(m)*S(d) + a*dt**2 * (cos(m)*G2(d) + sin(m)*G1(d))
    dy = v*dt*sin(m)*S(d) + a*dt**2 * (sin(m)*G2(d) - cos(m)*G1(d))

where ``S = sin(d/2)/(d/2)``, ``G2 = sin(d/2)/d`` and
``G1 = (d*cos(d/2) - 2*sin(d/2))/d**2``. This avoids the ``1/yaw_rate**2``
cancellation of the textbook form, which is unusable in float32.
Below ``EPS_OMEGA`` the yaw rate is treated as zero (straight-line
constant-acceleration limit, heading unchanged).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

EPS_OMEGA = 1e-4
EPS_STILL = 1e-3
_SERIES_CUTOFF = 0.1
MODEL_KINDS = ("CV", "CTRA")


class MotionModelError(ValueError):
    pass


def _series_terms(xp, d):
    d2 = d * d
    s = 1 - d2 / 24 + d2 * d2 / 1920 - d2 ** 3 / 322560
    g2 = 0.5 - d2 / 48 + d2 * d2 / 3840 - d2 ** 3 / 645120
    g1 = d * (-1 / 12 + d2 / 480 - d2 * d2 / 53760 + d2 ** 3 / 11612160)
    return s, g1, g2


def _direct_terms(xp, d):
    half_sin = xp.sin(d / 2)
    s = half_sin / (d / 2)
    g2 = half_sin / d
    g1 = (d * xp.cos(d / 2) - 2 * half_sin) / (d * d)
    return s, g1, g2


def ctra_increments(xp, yaw, v, a, yaw_rate, dt, eps=EPS_OMEGA):
    """Position/heading/speed increments of one CTRA step.

    ``xp`` is ``numpy`` or ``torch``; all inputs broadcast together.
    """
    w = xp.where(xp.abs(yaw_rate) < eps, yaw_rate * 0, yaw_rate)
    d = w * dt
    small = xp.abs(d) < _SERIES_CUTOFF
    d_safe = xp.where(small, d * 0 + 1, d)
    s_ser, g1_ser, g2_ser = _series_terms(xp, d)
    s_dir, g1_dir, g2_dir = _direct_terms(xp, d_safe)
    s = xp.where(small, s_ser, s_dir)
    g1 = xp.where(small, g1_ser, g1_dir)
    g2 = xp.where(small, g2_ser, g2_dir)
    m = yaw + d / 2
    cm, sm = xp.cos(m), xp.sin(m)
    adt2 = a * dt * dt
    dx = v * dt * cm * s + adt2 * (cm * g2 + sm * g1)
    dy = v * dt * sm * s + adt2 * (sm * g2 - cm * g1)
    return dx, dy, d, a * dt


def _wrap_torch(angle):
    wrapped = torch.remainder(angle + torch.pi, 2 * torch.pi) - torch.pi
    return torch.where(wrapped <= -torch.pi, wrapped + 2 * torch.pi, wrapped)


def _tensor(value, like=None):
    if isinstance(value, torch.Tensor):
        return value
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(value, dtype=dtype)


@dataclass
class KinematicState:
    """Agent state advanced by the motion models.

    All fields are tensors of a common (broadcastable) shape. ``clamped``
    records whether the last CTRA step hit the zero-speed clamp.
    """
    x: torch.Tensor
    y: torch.Tensor
    yaw: torch.Tensor
    v: torch.Tensor
    vx: torch.Tensor | None = None
    vy: torch.Tensor | None = None
    clamped: torch.Tensor | None = None

    def __post_init__(self):
        self.x = _tensor(self.x)
        for name in ("y", "yaw", "v"):
            setattr(self, name, _tensor(getattr(self, name), self.x))
        if self.vx is None:
            self.vx = self.v * torch.cos(self.yaw)
            self.vy = self.v * torch.sin(self.yaw)
        else:
            self.vx = _tensor(self.vx, self.x)
            self.vy = _tensor(self.vy, self.x)

    @property
    def position(self) -> torch.Tensor:
        return torch.stack([self.x, self.y], dim=-1)

    @classmethod
    def stack(cls, states: list["KinematicState"]) -> "KinematicState":
        return cls(*(torch.stack([getattr(s, f) for s in states]) for f in
                     ("x", "y", "yaw", "v", "vx", "vy")))

    def to_array(self) -> np.ndarray:
        """(..., 6) array of x, y, yaw, v, vx, vy."""
        return torch.stack([self.x, self.y, self.yaw, self.v, self.vx, self.vy],
                           dim=-1).detach().cpu().numpy()

    @classmethod
    def from_array(cls, arr, dtype=torch.float64) -> "KinematicState":
        t = torch.as_tensor(np.asarray(arr), dtype=dtype)
        return cls(t[..., 0], t[..., 1], t[..., 2], t[..., 3], t[..., 4], t[..., 5])


@dataclass
class ActionSeries:
    """Per-step motion-model inputs: CV -> (vx, vy), CTRA -> (a, yaw_rate)."""
    model_kind: str
    values: np.ndarray
    still: bool = False

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise MotionModelError(f"unknown motion model {self.model_kind!r}")
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim < 1 or self.values.shape[-1] != 2:
            raise MotionModelError("actions must have 2 features per step")

    def __len__(self):
        return self.values.shape[-2] if self.values.ndim > 1 else 0


def _check_finite(*tensors):
    for t in tensors:
        if t is not None and not torch.isfinite(t).all():
            raise MotionModelError("non-finite motion model input")


def cv_step(state: KinematicState, action, dt: float) -> KinematicState:
    """Advance with commanded velocity ``action = (vx, vy)``."""
    if not dt > 0:
        raise MotionModelError(f"dt must be positive, got {dt}")
    action = _tensor(action, state.x)
    vx, vy = action[..., 0], action[..., 1]
    _check_finite(state.x, state.y, vx, vy)
    speed = torch.hypot(vx, vy)
    # heading follows the velocity only when it is well defined
    yaw = torch.where(speed * dt > EPS_STILL, torch.atan2(vy, vx), state.yaw)
    return KinematicState(state.x + vx * dt, state.y + vy * dt, yaw, speed, vx, vy)


def ctra_step(state: KinematicState, action, dt: float,
              eps: float = EPS_OMEGA) -> KinematicState:
    """Advance with ``action = (a, yaw_rate)``; speed is clamped at zero."""
    if not dt > 0:
        raise MotionModelError(f"dt must be positive, got {dt}")
    action = _tensor(action, state.x)
    a, w = action[..., 0], action[..., 1]
    _check_finite(state.x, state.y, state.yaw, state.v, a, w)
    dx, dy, dyaw, dv = ctra_increments(torch, state.yaw, state.v, a, w, dt, eps)
    v_new = state.v + dv
    clamped = v_new < 0
    v_new = torch.clamp(v_new, min=0.0)
    yaw = _wrap_torch(state.yaw + dyaw)
    return KinematicState(state.x + dx, state.y + dy, yaw, v_new,
                          v_new * torch.cos(yaw), v_new * torch.sin(yaw), clamped)


def step(kind: str, state: KinematicState, action, dt: float) -> KinematicState:
    if kind == "CV":
        return cv_step(state, action, dt)
    if kind == "CTRA":
        return ctra_step(state, action, dt)
    raise MotionModelError(f"unknown motion model {kind!r}")


def rollout(init: KinematicState, actions, dt: float, kind: str = "CTRA",
            return_states: bool = False):
    """Apply the per-step model over ``actions`` of shape (..., K, 2).

    Returns positions of shape (..., K, 2), differentiable w.r.t. the
    actions and the initial state.
    """
    if isinstance(actions, ActionSeries):
        kind, actions = actions.model_kind, actions.values
    actions = _tensor(actions, init.x)
    if actions.ndim < 2 or actions.shape[-2] == 0:
        raise MotionModelError("rollout needs at least one action")
    state, points, states = init, [], []
    for k in range(actions.shape[-2]):
        state = step(kind, state, actions[..., k, :], dt)
        points.append(state.position)
        states.append(state)
    traj = torch.stack(points, dim=-2)
    return (traj, states) if return_states else traj


def euler_oracle(init, actions, dt: float, substeps: int, kind: str = "CTRA",
                 chunk: int = 20000) -> np.ndarray:
    """Fine-step explicit Euler integration of the kinematics.

    ``init`` is an (..., 4) array of x, y, yaw, v (or a KinematicState);
    ``actions`` is (..., K, 2). Independent of :func:`ctra_increments`;
    converges to the closed form at first order in ``dt / substeps``.
    """
    if substeps < 1:
        raise MotionModelError("substeps must be >= 1")
    if isinstance(init, KinematicState):
        init = init.to_array()[..., :4]
    init = np.asarray(init, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if not (np.isfinite(init).all() and np.isfinite(actions).all()):
        raise MotionModelError("non-finite oracle input")
    batch = init.shape[:-1]
    x, y, yaw, v = (init[..., i].reshape(-1).copy() for i in range(4))
    acts = actions.reshape(-1, actions.shape[-2], 2)
    h = dt / substeps
    out = np.empty((x.size, acts.shape[1], 2))
    for k in range(acts.shape[1]):
        a, w = acts[:, k, 0], acts[:, k, 1]
        if kind == "CV":
            x = x + a * dt
            y = y + w * dt
        else:
            sx = np.zeros_like(x)
            sy = np.zeros_like(y)
            for start in range(0, substeps, chunk):
                j = np.arange(start, min(start + chunk, substeps))[None, :]
                yaw_j = yaw[:, None] + j * (w[:, None] * h)
                v_j = v[:, None] + j * (a[:, None] * h)
                sx += (v_j * np.cos(yaw_j)).sum(axis=1)
                sy += (v_j * np.sin(yaw_j)).sum(axis=1)
            x = x + h * sx
            y = y + h * sy
            yaw = yaw + substeps * w * h
            v = np.maximum(v + substeps * a * h, 0.0)
        out[:, k, 0] = x
        out[:, k, 1] = y
    return out.reshape(*batch, acts.shape[1], 2)


def _ctra_np(state, a, w, dt):
    x, y, yaw, v = state
    dx, dy, dyaw, dv = ctra_increments(np, yaw, v, a, w, dt)
    v_new = max(v + dv, 0.0)
    return np.array([x + dx, y + dy, float(np.arctan2(np.sin(yaw + dyaw), np.cos(yaw + dyaw))),
                     v_new])


def _solve_ctra_step(state, target, dt, iters=30, tol=1e-11):
    x, y, yaw, v = state
    delta = target - state[:2]
    dist = float(np.hypot(*delta))
    heading = np.arctan2(delta[1], delta[0]) if dist > EPS_STILL else yaw
    dheading = np.arctan2(np.sin(heading - yaw), np.cos(heading - yaw))
    guess = np.array([2 * (dist - v * dt) / dt ** 2, 2 * dheading / dt])

    def residual(p):
        return _ctra_np(state, p[0], p[1], dt)[:2] - target

    best, best_err = guess, np.inf
    lam = 1e-9
    for _ in range(iters):
        r = residual(guess)
        err = float(np.hypot(*r))
        if err < best_err:
            best, best_err = guess.copy(), err
        if err < tol:
            break
        jac = np.empty((2, 2))
        for i, hstep in enumerate((1e-6 * max(1.0, abs(guess[0])), 1e-7)):
            e = np.zeros(2)
            e[i] = hstep
            jac[:, i] = (residual(guess + e) - residual(guess - e)) / (2 * hstep)
        lhs = jac.T @ jac + lam * np.eye(2)
        guess = guess - np.linalg.solve(lhs, jac.T @ r)
    return best, best_err


def invert_trajectory(trajectory, init: KinematicState | np.ndarray, dt: float,
                      model_kind: str = "CTRA") -> ActionSeries:
    """Recover the per-step actions that drive ``init`` through ``trajectory``.

    CV inversion is exact. CTRA solves each step's (a, yaw_rate) by damped
    Gauss-Newton on the closed form, seeded from chord geometry, so a
    rollout of the result retraces the input whenever the input is
    kinematically reachable.
    """
    traj = np.asarray(trajectory, dtype=float)
    if traj.ndim != 2 or len(traj) < 2:
        raise MotionModelError("inversion needs at least 2 trajectory points")
    if isinstance(init, KinematicState):
        init = init.to_array()
    init = np.asarray(init, dtype=float)
    if model_kind == "CV":
        pts = np.vstack([init[None, :2], traj])
        return ActionSeries("CV", np.diff(pts, axis=0) / dt)
    if model_kind != "CTRA":
        raise MotionModelError(f"unknown motion model {model_kind!r}")

    pts = np.vstack([init[None, :2], traj])
    if np.abs(pts - pts[0]).max() < EPS_STILL and init[3] * dt < EPS_STILL:
        return ActionSeries("CTRA", np.zeros((len(traj), 2)), still=True)
    state = init[:4].copy()
    actions = np.empty((len(traj), 2))
    for k, target in enumerate(traj):
        actions[k], _ = _solve_ctra_step(state, target, dt)
        state = _ctra_np(state, actions[k, 0], actions[k, 1], dt)
    return ActionSeries("CTRA", actions)
