"""Uncalibrated image-based control: online Jacobian estimation and tracking.

The image Jacobian maps end-effector twist increments ``dq = (v, w) dt`` (end-
effector frame, m and rad) to stacked pixel increments ``dy``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .errors import Deadband, InsufficientExcitation
from .planner import FeatureSet, PlannedImageTrajectory

N_DOF = 6


@dataclass(frozen=True)
class JacobianEstimate:
    j: np.ndarray
    updates: int = 0
    residual: float = 0.0

    def __post_init__(self):
        j = np.asarray(self.j, dtype=float)
        if j.ndim != 2 or j.shape[1] != N_DOF or j.shape[0] % 2:
            raise ValueError(f"Jacobian must be (2N, 6), got {j.shape}")
        if not np.all(np.isfinite(j)):
            raise ValueError("Jacobian has non-finite entries")
        object.__setattr__(self, "j", j)


@dataclass(frozen=True)
class ControlCommand:
    qdot: np.ndarray
    flags: tuple = ()


def init_jacobian(probe_responses) -> JacobianEstimate:
    """Least-squares Jacobian from ``(dq, dy)`` excitation pairs.

    ``residual`` is the RMS pixel misfit of the fitted pairs.
    """
    pairs = list(probe_responses)
    if len(pairs) < N_DOF:
        raise InsufficientExcitation(f"need at least {N_DOF} probes, got {len(pairs)}")
    dq = np.array([np.asarray(p[0], dtype=float) for p in pairs])
    dy = np.array([np.asarray(p[1], dtype=float) for p in pairs])
    if np.linalg.matrix_rank(dq) < N_DOF:
        raise InsufficientExcitation("probe twists do not span all 6 directions")
    sol, *_ = np.linalg.lstsq(dq, dy, rcond=None)
    resid = dy - dq @ sol
    return JacobianEstimate(sol.T, 0, float(np.sqrt(np.mean(resid ** 2))))


def broyden_update(est: JacobianEstimate, dq, dy, *, forgetting: float = 0.9,
                   deadband: float = 1e-6) -> JacobianEstimate:
    """Rank-one secant update ``J += f (dy - J dq) dq^T / (dq^T dq)``.

    Raises :class:`Deadband` (no update) when ``|dq|`` is below ``deadband``.
    """
    if not 0.0 < forgetting <= 1.0:
        raise ValueError("forgetting factor must be in (0, 1]")
    dq = np.asarray(dq, dtype=float)
    dy = np.asarray(dy, dtype=float)
    nq = float(dq @ dq)
    if np.sqrt(nq) <= deadband:
        raise Deadband(f"|dq| = {np.sqrt(nq):.3e} below deadband {deadband:g}")
    innovation = dy - est.j @ dq
    j = est.j + forgetting * np.outer(innovation, dq) / nq
    return replace(est, j=j, updates=est.updates + 1)


@dataclass
class RLSJacobian:
    """Recursive least-squares alternative to :func:`broyden_update`."""

    est: JacobianEstimate
    forgetting: float = 0.95
    deadband: float = 1e-6
    cov: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.cov is None:
            self.cov = np.eye(N_DOF) * 1e3

    def update(self, dq, dy) -> JacobianEstimate:
        dq = np.asarray(dq, dtype=float)
        if np.linalg.norm(dq) <= self.deadband:
            raise Deadband(f"|dq| = {np.linalg.norm(dq):.3e} below deadband {self.deadband:g}")
        pq = self.cov @ dq
        gain = pq / (self.forgetting + dq @ pq)
        innovation = np.asarray(dy, dtype=float) - self.est.j @ dq
        self.est = replace(self.est, j=self.est.j + np.outer(innovation, gain),
                           updates=self.est.updates + 1)
        self.cov = (self.cov - np.outer(gain, pq)) / self.forgetting
        return self.est


@dataclass
class BroydenJacobian:
    est: JacobianEstimate
    forgetting: float = 0.9
    deadband: float = 1e-6

    def update(self, dq, dy) -> JacobianEstimate:
        self.est = broyden_update(self.est, dq, dy, forgetting=self.forgetting,
                                  deadband=self.deadband)
        return self.est


def damped_pinv(j, damping: float = 1e-3):
    """Pseudo-inverse with Tikhonov damping ``mu = damping * sigma_max``."""
    u, s, vt = np.linalg.svd(j, full_matrices=False)
    mu = damping * s[0]
    return (vt.T * (s / (s * s + mu * mu))) @ u.T, s


def clamp_twist(qdot, v_max: float = 0.1, w_max: float = 0.3):
    """Uniformly scale a twist so both linear and angular speeds are within limits."""
    qdot = np.asarray(qdot, dtype=float)
    ratio = max(np.linalg.norm(qdot[:3]) / v_max, np.linalg.norm(qdot[3:]) / w_max, 1.0)
    return qdot / ratio, ratio > 1.0


def control_step(est: JacobianEstimate, current: FeatureSet, target: FeatureSet, gain: float, *,
                 damping: float = 1e-3, singular_tol: float = 1e-3,
                 v_max: float = 0.1, w_max: float = 0.3) -> ControlCommand:
    """Proportional law ``qdot = gain * pinv(J) (target - current)`` with limits.

    The ``singular`` flag is raised when ``sigma_min < singular_tol * sigma_max``;
    the damped inverse is used regardless.
    """
    if gain <= 0:
        raise ValueError("gain must be positive")
    target = current.aligned(target)
    err = target.vector - current.vector
    if not np.any(err):
        return ControlCommand(np.zeros(N_DOF))
    pinv, s = damped_pinv(est.j, damping)
    flags = []
    if s[-1] < singular_tol * s[0]:
        flags.append("singular")
    qdot, clamped = clamp_twist(gain * (pinv @ err), v_max, w_max)
    if clamped:
        flags.append("clamped")
    return ControlCommand(qdot, tuple(flags))


@dataclass
class TrackerState:
    desired: FeatureSet
    trajectory: PlannedImageTrajectory | None = None
    cursor: int = 0
    mode: Literal["track-planned", "classical-goal"] = "track-planned"

    def __post_init__(self):
        if self.mode == "track-planned" and self.trajectory is None:
            raise ValueError("track-planned mode needs a trajectory")

    @property
    def last(self) -> int:
        return 0 if self.trajectory is None else len(self.trajectory) - 1

    @property
    def finished(self) -> bool:
        return self.mode == "classical-goal" or self.cursor >= self.last

    @property
    def t_cursor(self) -> float:
        return 1.0 if self.trajectory is None else float(self.trajectory.ts[self.cursor])


def track_trajectory(state: TrackerState, current: FeatureSet, advance_tol: float = 2.0) -> FeatureSet:
    """Target for this tick; advances the cursor once the current sample is reached."""
    if state.mode == "classical-goal":
        return state.desired
    sample = state.trajectory.features(state.cursor)
    if state.cursor < state.last and sample.max_distance(current) < advance_tol:
        state.cursor += 1
        sample = state.trajectory.features(state.cursor)
    return sample
