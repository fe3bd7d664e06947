"""Rigid-body math, pinhole projection and geodesic rotation interpolation.

Rotations are plain ``(3, 3)`` float arrays throughout; :func:`check_rotation`
validates them and :func:`nearest_rotation` is the explicit repair for drift.
Angles are radians everywhere in this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth

ROTATION_TOL = 1e-9
_Z_AXIS = np.array([0.0, 0.0, 1.0])


def hat(v):
    """Skew-symmetric matrix such that ``hat(v) @ x == cross(v, x)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def check_rotation(r, tol: float = ROTATION_TOL) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    return bool(np.allclose(r.T @ r, np.eye(3), rtol=0.0, atol=tol)
                and abs(np.linalg.det(r) - 1.0) <= tol)


def nearest_rotation(m):
    """Project a 3x3 matrix onto SO(3) in the Frobenius sense."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class AxisAngle:
    axis: np.ndarray
    angle: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        n = np.linalg.norm(axis)
        if n == 0.0:
            raise ValueError("axis must be nonzero")
        object.__setattr__(self, "axis", axis / n)
        object.__setattr__(self, "angle", float(self.angle))

    @property
    def rotvec(self):
        return self.axis * self.angle


def _first_nonzero_positive(k):
    for c in k:
        if abs(c) > 1e-12:
            return k if c > 0 else -k
    return k


def rotation_to_axis_angle(r) -> AxisAngle:
    """Log map of SO(3): returns ``(axis, angle)`` with angle in ``[0, pi]``.

    Identity maps to axis ``(0, 0, 1)``. At exactly a half-turn the axis sign is
    fixed so its first nonzero component is positive.
    """
    r = np.asarray(r, dtype=float)
    w = 0.5 * vee(r - r.T)          # sin(theta) * k
    s = np.linalg.norm(w)
    c = 0.5 * (np.trace(r) - 1.0)
    theta = float(np.arctan2(s, c))
    if s < 1e-15 and c > 0:
        return AxisAngle(_Z_AXIS, 0.0)
    if c >= 0.0:
        return AxisAngle(w / s, theta)
    # Obtuse angles: read the axis off the symmetric part, which stays well
    # conditioned where sin(theta) vanishes.
    b = 0.5 * (r + r.T) - c * np.eye(3)      # (1 - cos) k k^T
    i = int(np.argmax(np.diag(b)))
    k = b[:, i] / np.sqrt(b[i, i])
    k /= np.linalg.norm(k)
    if s > 1e-12:
        if k @ w < 0:
            k = -k
    else:
        k = _first_nonzero_positive(k)
    return AxisAngle(k, theta)


def axis_angle_to_rotation(aa: AxisAngle):
    """Rodrigues formula."""
    k = hat(aa.axis)
    return np.eye(3) + np.sin(aa.angle) * k + (1.0 - np.cos(aa.angle)) * (k @ k)


def rotation_from_rotvec(rv):
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv)
    if angle == 0.0:
        return np.eye(3)
    return axis_angle_to_rotation(AxisAngle(rv, angle))


def rotvec_from_rotation(r):
    return rotation_to_axis_angle(r).rotvec


def rotation_angle(r) -> float:
    return rotation_to_axis_angle(r).angle


def interpolate_rotation(r, t: float):
    """Point at fraction ``t`` of the minimal geodesic from identity to ``r``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    aa = rotation_to_axis_angle(r)
    return axis_angle_to_rotation(AxisAngle(aa.axis, t * aa.angle))


def interpolate_translation(t_vec, t: float):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t * np.asarray(t_vec, dtype=float)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: ``x_parent = rot @ x_child + trans``."""

    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rot", np.asarray(self.rot, dtype=float).reshape(3, 3))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, trans) -> "Pose":
        return cls(rotation_from_rotvec(rotvec), trans)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rot
        m[:3, 3] = self.trans
        return m

    def inverse(self) -> "Pose":
        return Pose(self.rot.T, -self.rot.T @ self.trans)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rot @ other.rot, self.rot @ other.trans + self.trans)

    def apply(self, points):
        """Map ``(N, 3)`` child-frame points into the parent frame."""
        return np.asarray(points, dtype=float) @ self.rot.T + self.trans

    def is_valid(self, tol: float = ROTATION_TOL) -> bool:
        return check_rotation(self.rot, tol) and bool(np.all(np.isfinite(self.trans)))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self):
        return np.array([[self.fx, self.skew, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def K_inv(self):
        return np.linalg.inv(self.K)


def project(intrinsics: CameraIntrinsics, points):
    """Pinhole projection of camera-frame points to normalized pixels.

    Accepts a single 3-vector or an ``(N, 3)`` array and returns homogeneous
    pixels ``(u, v, 1)`` with the same leading shape.
    """
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    z = p[:, 2]
    if np.any(z <= 0.0):
        bad = np.flatnonzero(z <= 0.0)
        raise NonPositiveDepth(f"points {bad.tolist()} have non-positive depth")
    q = p @ intrinsics.K.T
    q = q / q[:, 2:3]
    q[:, 2] = 1.0
    return q[0] if single else q


def compose_hand_eye(fe_motion: Pose, hand_eye: Pose) -> Pose:
    """Camera motion induced by an end-effector motion.

    ``fe_motion`` is {F_t} relative to {F_0}; ``hand_eye`` is {C} relative to
    {F}. Returns {C_t} relative to {C_0}.
    """
    r_cf = hand_eye.rot.T
    rot = r_cf @ fe_motion.rot @ r_cf.T
    trans = r_cf @ (fe_motion.rot - np.eye(3)) @ hand_eye.trans + r_cf @ fe_motion.trans
    return Pose(rot, trans)


def interpolate_pose(motion: Pose, t: float) -> Pose:
    """Geodesic rotation paired with straight-line translation."""
    return Pose(interpolate_rotation(motion.rot, t), interpolate_translation(motion.trans, t))
