"""Image feature trajectories for geodesic + straight-line motion.

Two planners share one evaluation path:

* camera frame: ``normalize( Hinf_t^-1 (H - t (H - Hinf)) p1 )``
* end-effector frame: the same bracket plus ``B(t) tau_j`` where
  ``B(t) = t (Hinf - I) - (Hinf_t - I)`` and ``tau_j`` is the pixel-scaled
  hand-eye offset of feature ``j`` recovered from pure-rotation probes.

Only homographies and pixels enter here; intrinsics, hand-eye and depths never
do.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import (ImplausibleHandEyeTerm, NumericalBlowup, RankDeficient,
                     ScaleStatusError)
from .homography import (METRIC, Homography, InfiniteHomography,
                         fractional_powers, rotation_angle_of, to_homogeneous)

W_MIN = 1e-9
TAU_CAP = 1e5
DEFAULT_SAMPLES = 50


@dataclass(frozen=True)
class FeatureSet:
    """Ordered pixel positions ``(N, 2)`` with stable labels."""

    points: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] not in (2, 3):
            raise ValueError(f"points must be (N, 2), got {pts.shape}")
        if pts.shape[1] == 3:
            pts = pts[:, :2] / pts[:, 2:3]
        labels = tuple(self.labels) if len(self.labels) else tuple(f"p{i}" for i in range(len(pts)))
        if len(labels) != len(pts):
            raise ValueError("one label per point required")
        if len(set(labels)) != len(labels):
            raise ValueError("labels must be unique")
        if len(pts) < 4:
            raise ValueError(f"a feature set needs at least 4 points, got {len(pts)}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.points)

    @property
    def homogeneous(self):
        return to_homogeneous(self.points)

    @property
    def vector(self):
        """Stacked ``(u0, v0, u1, v1, ...)`` as used by the image Jacobian."""
        return self.points.reshape(-1)

    def aligned(self, other: "FeatureSet") -> "FeatureSet":
        """Reorder ``other``'s points to match this set's labels."""
        if other.labels == self.labels:
            return other
        index = {lab: i for i, lab in enumerate(other.labels)}
        return FeatureSet(other.points[[index[lab] for lab in self.labels]], self.labels)

    def max_distance(self, other: "FeatureSet") -> float:
        return float(np.max(np.linalg.norm(self.points - self.aligned(other).points, axis=1)))

    def rms_distance(self, other: "FeatureSet") -> float:
        d = self.points - self.aligned(other).points
        return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


@dataclass(frozen=True)
class CameraPlanInput:
    h: Homography
    h_inf: InfiniteHomography
    desired: FeatureSet
    current: FeatureSet
    consistency_tol: float = 5.0

    def __post_init__(self):
        if self.h.scale != METRIC:
            raise ScaleStatusError("planning requires a metric-scale homography")
        if not self.h_inf.normalized:
            raise ScaleStatusError("planning requires a normalized infinite homography")
        if self.desired.labels != self.current.labels:
            object.__setattr__(self, "current", self.desired.aligned(self.current))
        err = np.max(np.linalg.norm(self.h.apply(self.desired.points) - self.current.points, axis=1))
        if err > self.consistency_tol:
            raise ValueError(f"h maps desired onto current with {err:.3g} px error")


@dataclass(frozen=True)
class HandEyeTerm:
    """Pixel-scaled hand-eye offset ``K R_cf t_fc / z_ref``.

    ``weights[j] = z_ref / z_j`` carries the relative inverse depth of each
    desired feature, so feature ``j`` sees ``tau * weights[j]``. For a target
    parallel to the desired image plane all weights are 1.
    """

    tau: np.ndarray
    weights: np.ndarray | None = None
    unobservable: np.ndarray | None = None
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cap: float = TAU_CAP

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float).reshape(3)
        if not np.all(np.isfinite(tau)):
            raise ImplausibleHandEyeTerm("tau is not finite")
        if np.linalg.norm(tau) > self.cap:
            raise ImplausibleHandEyeTerm(
                f"|tau| = {np.linalg.norm(tau):.3g} px exceeds cap {self.cap:g}; check homography scales")
        object.__setattr__(self, "tau", tau)
        if self.weights is not None:
            object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))

    @classmethod
    def zero(cls) -> "HandEyeTerm":
        return cls(np.zeros(3))

    def per_feature(self, n: int):
        """``(3, n)`` matrix whose column ``j`` is the offset seen by feature ``j``."""
        w = np.ones(n) if self.weights is None else self.weights
        if len(w) != n:
            raise ValueError(f"hand-eye term has {len(w)} weights for {n} features")
        return np.outer(self.tau, w)


@dataclass(frozen=True)
class PlannedImageTrajectory:
    ts: np.ndarray
    points: np.ndarray                  # (T, N, 2)
    labels: tuple
    mode: Literal["camera-frame", "effector-frame"]

    def __len__(self):
        return len(self.ts)

    def features(self, i: int) -> FeatureSet:
        return FeatureSet(self.points[i], self.labels)

    @property
    def samples(self):
        return [(float(t), self.features(i)) for i, t in enumerate(self.ts)]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["t", "label", "u", "v"])
            for t, pts in zip(self.ts, self.points):
                for lab, (u, v) in zip(self.labels, pts):
                    writer.writerow([repr(float(t)), lab, repr(float(u)), repr(float(v))])


def _sample_times(samples: int):
    if samples < 2:
        raise ValueError("need at least 2 samples")
    return np.linspace(0.0, 1.0, samples)


def _evaluate(inp: CameraPlanInput, ts, offsets=None):
    """Shared core: returns planned pixels ``(T, N, 2)``."""
    h = inp.h.m
    h_inf = inp.h_inf.m
    p1 = inp.desired.homogeneous.T                      # (3, N)
    h_ts = fractional_powers(inp.h_inf, ts)
    eye = np.eye(3)
    out = np.empty((len(ts), p1.shape[1], 2))
    for i, t in enumerate(ts):
        bracket = (h - t * (h - h_inf)) @ p1
        if offsets is not None:
            b_t = t * (h_inf - eye) - (h_ts[i] - eye)
            bracket = bracket + b_t @ offsets
        q = np.linalg.solve(h_ts[i], bracket)
        w = q[2]
        if np.any(np.abs(w) < W_MIN):
            raise NumericalBlowup(f"planned point at infinity at t={t:.4f}")
        out[i] = (q[:2] / w).T
    return out


def plan_camera_trajectory(inp: CameraPlanInput, samples: int = DEFAULT_SAMPLES) -> PlannedImageTrajectory:
    """Image paths for geodesic + straight-line motion of the camera frame."""
    ts = _sample_times(samples)
    return PlannedImageTrajectory(ts, _evaluate(inp, ts), inp.desired.labels, "camera-frame")


def plan_effector_trajectory(inp: CameraPlanInput, hand_eye: HandEyeTerm,
                             samples: int = DEFAULT_SAMPLES) -> PlannedImageTrajectory:
    """Image paths for geodesic + straight-line motion of the end-effector frame."""
    ts = _sample_times(samples)
    offsets = hand_eye.per_feature(len(inp.desired))
    return PlannedImageTrajectory(ts, _evaluate(inp, ts, offsets), inp.desired.labels, "effector-frame")


def implied_effector_translation_trajectory(inp: CameraPlanInput, hand_eye: HandEyeTerm, t: float):
    """Pixel-scaled end-effector translation term at time ``t`` (divided by ``z_ref``).

    Each feature gives the same vector on exact data; the feature mean is returned.
    """
    n = len(inp.desired)
    w = np.ones(n) if hand_eye.weights is None else hand_eye.weights
    diff = (inp.h.m - inp.h_inf.m) @ inp.desired.homogeneous.T       # (3, N)
    per_feature = diff / w - ((inp.h_inf.m - np.eye(3)) @ hand_eye.tau)[:, None]
    return t * per_feature.mean(axis=1)


def estimate_hand_eye_term(probes, desired: FeatureSet, h: Homography, *,
                           min_probe_angle: float = np.deg2rad(5.0),
                           rank_tol: float = 1e-6,
                           per_feature_depth: bool = True) -> HandEyeTerm:
    """Recover the pixel-scaled hand-eye offset from pure end-effector rotations.

    ``probes`` is one ``(H_r, H_r_inf)`` pair or a sequence of them, each mapping
    current-image pixels to the image seen after a pure end-effector rotation.
    Both members must be metric / normalized. For every probe and feature

        (H_r_inf - I) tau_j = (H_r - H_r_inf) H p1_j

    and all equations are solved jointly in the least-squares sense. One probe
    leaves ``tau`` unobservable along its rotation axis image; that direction is
    reported in ``unobservable`` and the minimum-norm solution is returned.
    """
    if isinstance(probes, tuple) and len(probes) == 2 and isinstance(probes[0], Homography):
        probes = [probes]
    probes = list(probes)
    if not probes:
        raise ValueError("at least one probe required")
    if h.scale != METRIC:
        raise ScaleStatusError("desired-to-current homography must be metric")
    x = h.m @ desired.homogeneous.T                                  # (3, N)
    n = x.shape[1]
    mats, rhs = [], []
    for h_r, h_r_inf in probes:
        if h_r.scale != METRIC:
            raise ScaleStatusError("probe homography must be metric")
        angle = rotation_angle_of(h_r_inf)
        if angle < min_probe_angle:
            raise RankDeficient(
                f"probe rotation {np.rad2deg(angle):.3g} deg below floor "
                f"{np.rad2deg(min_probe_angle):.3g} deg; tau unobservable")
        mats.append(h_r_inf.m - np.eye(3))
        rhs.append((h_r.m - h_r_inf.m) @ x)
    m = np.vstack(mats)                                              # (3P, 3)
    v = np.vstack(rhs)                                               # (3P, N)

    weights = np.ones(n)
    if per_feature_depth and np.linalg.norm(v) > 1e-12 * np.linalg.norm(x):
        # Right-hand sides are rank one: one vector scaled by z_ref / z_j.
        _, _, vt = np.linalg.svd(v, full_matrices=False)
        k = vt[0]
        weights = k / k.mean()

    _, s, vt = np.linalg.svd(m)
    rank = int(np.sum(s > rank_tol * s[0])) if s[0] > 0 else 0
    if len(probes) == 1:
        rank = min(rank, 2)
    if rank < 2:
        raise RankDeficient(f"stacked probe system has rank {rank}", unobservable=vt[rank:])
    # Weighted stacked least squares: sum_j ||w_j M tau - v_j||^2.
    target = v @ weights / (weights @ weights)
    u_m, s_m, vt_m = np.linalg.svd(m, full_matrices=False)
    inv = np.where(np.arange(3) < rank, 1.0 / np.where(s_m > 0, s_m, 1.0), 0.0)
    tau = vt_m.T @ (inv * (u_m.T @ target))
    unobservable = vt_m[2] if rank == 2 else None
    return HandEyeTerm(tau, weights if per_feature_depth else None, unobservable, s)
