"""Plane homographies and infinite homographies from pixel correspondences.

Scale handling is explicit. ``estimate_homography_dlt`` returns a
``projective`` homography (Frobenius norm sqrt(3)); only
:func:`align_metric_scale` or :func:`metric_scale_from_infinite` promote it to
``metric`` scale, i.e. ``K (R - t n^T / d) K^-1`` exactly, which is what the
trajectory formulas need when mixing ``H`` with a det-1 infinite homography.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import (DegenerateConfiguration, InvalidDepthRatio, NearHalfTurn,
                     NotRotationSimilar, SingularMatrix)

PROJECTIVE = "projective"
METRIC = "metric"
HALF_TURN_MARGIN = 1e-4


def to_homogeneous(points):
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if p.shape[1] == 2:
        return np.hstack([p, np.ones((len(p), 1))])
    if p.shape[1] != 3:
        raise ValueError(f"expected (N, 2) or (N, 3) points, got {p.shape}")
    return p


def dehomogenize(points):
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if p.shape[1] == 2:
        return p
    return p[:, :2] / p[:, 2:3]


@dataclass(frozen=True)
class Correspondence:
    """One pixel pair: ``src`` in the desired image, ``dst`` in the current one."""

    src: np.ndarray
    dst: np.ndarray

    def __post_init__(self):
        for name in ("src", "dst"):
            p = to_homogeneous(getattr(self, name))[0]
            object.__setattr__(self, name, p / p[2])


@dataclass(frozen=True)
class Homography:
    m: np.ndarray
    scale: Literal["projective", "metric"] = PROJECTIVE

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=float).reshape(3, 3))
        if self.scale not in (PROJECTIVE, METRIC):
            raise ValueError(f"unknown scale status {self.scale!r}")

    def apply(self, points):
        """Map pixels and return them normalized as ``(N, 2)``."""
        return dehomogenize(to_homogeneous(points) @ self.m.T)

    def to_list(self):
        return [float(x) for x in self.m.ravel()]


@dataclass(frozen=True)
class InfiniteHomography:
    m: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=float).reshape(3, 3))

    def apply(self, points):
        return dehomogenize(to_homogeneous(points) @ self.m.T)

    def to_list(self):
        return [float(x) for x in self.m.ravel()]


@dataclass(frozen=True)
class SpectralDecomposition:
    ev_real_axis: np.ndarray
    ev_pair: np.ndarray
    theta: float

    def eigenvector_matrix(self):
        return np.column_stack([self.ev_pair, self.ev_pair.conj(), self.ev_real_axis])

    def reconstruct(self, t: float = 1.0):
        """``U diag(e^{i t theta}, e^{-i t theta}, 1) U^-1`` (real part)."""
        u = self.eigenvector_matrix()
        phase = np.exp(1j * t * self.theta)
        delta = np.diag([phase, phase.conjugate(), 1.0])
        return (u @ delta @ np.linalg.inv(u)).real


def _conditioning(points):
    """Similarity sending the centroid to the origin with RMS radius sqrt(2)."""
    c = points.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((points - c) ** 2, axis=1)))
    if rms < 1e-15:
        raise DegenerateConfiguration("all points coincide")
    s = np.sqrt(2.0) / rms
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _normalize_projective(m):
    m = m * (np.sqrt(3.0) / np.linalg.norm(m))
    pivot = m[2, 2] if abs(m[2, 2]) > 1e-12 else m.flat[np.argmax(np.abs(m))]
    return m if pivot > 0 else -m


def _dlt(src, dst, rank_tol):
    t_src = _conditioning(src)
    t_dst = _conditioning(dst)
    a = to_homogeneous(src) @ t_src.T
    b = to_homogeneous(dst) @ t_dst.T
    n = len(a)
    design = np.zeros((2 * n, 9))
    for i in range(n):
        x = a[i]
        u, v, w = b[i]
        design[2 * i, 3:6] = -w * x
        design[2 * i, 6:9] = v * x
        design[2 * i + 1, 0:3] = w * x
        design[2 * i + 1, 6:9] = -u * x
    _, sv, vt = np.linalg.svd(design)
    if sv[7] < rank_tol * sv[0]:
        raise DegenerateConfiguration(
            f"design matrix rank-deficient (sigma_8/sigma_1 = {sv[7] / sv[0]:.3e})")
    h = vt[-1].reshape(3, 3)
    return np.linalg.inv(t_dst) @ h @ t_src


def estimate_homography_dlt(src, dst, *, rank_tol: float = 1e-9,
                            reject_px: float | None = None) -> Homography:
    """Normalized DLT estimate of ``H`` with ``dst ~ H src``.

    ``src``/``dst`` are ``(N, 2)`` or normalized ``(N, 3)`` pixel arrays, N >= 4.
    With ``reject_px`` set, correspondences whose symmetric transfer error
    exceeds it are dropped and the fit is repeated once.
    """
    src = dehomogenize(src)
    dst = dehomogenize(dst)
    if len(src) != len(dst):
        raise ValueError("src and dst must have equal length")
    if len(src) < 4:
        raise DegenerateConfiguration(f"need at least 4 correspondences, got {len(src)}")
    m = _dlt(src, dst, rank_tol)
    if reject_px is not None:
        keep = transfer_error(Homography(m), src, dst) <= reject_px
        if keep.sum() >= 4 and not keep.all():
            m = _dlt(src[keep], dst[keep], rank_tol)
    return Homography(_normalize_projective(m), PROJECTIVE)


def transfer_error(h: Homography, src, dst):
    """Per-pair symmetric transfer error in pixels."""
    src = dehomogenize(src)
    dst = dehomogenize(dst)
    fwd = np.linalg.norm(h.apply(src) - dst, axis=1)
    back = np.linalg.norm(Homography(np.linalg.inv(h.m)).apply(dst) - src, axis=1)
    return 0.5 * (fwd + back)


def normalize_infinite_homography(h) -> InfiniteHomography:
    """Scale ``h`` to unit determinant (real cube root keeps the +1 eigenvalue)."""
    m = h.m if isinstance(h, (Homography, InfiniteHomography)) else np.asarray(h, dtype=float)
    det = np.linalg.det(m)
    if abs(det) < 1e-12:
        raise SingularMatrix(f"|det| = {abs(det):.3e}")
    return InfiniteHomography(m / np.cbrt(det), normalized=True)


def spectrum_deviation(h: InfiniteHomography) -> float:
    """Largest deviation of an eigenvalue modulus from 1."""
    return float(np.max(np.abs(np.abs(np.linalg.eigvals(h.m)) - 1.0)))


def estimate_infinite_homography(src, dst, *, tol: float = 1e-3) -> InfiniteHomography:
    """Infinite homography from >= 4 vanishing-point correspondences."""
    h = normalize_infinite_homography(estimate_homography_dlt(src, dst))
    dev = spectrum_deviation(h)
    if dev > tol:
        raise NotRotationSimilar(f"eigenvalue moduli deviate from 1 by {dev:.3e}")
    return h


def rotation_angle_of(h: InfiniteHomography) -> float:
    """Rotation angle of the rotation similar to ``h`` (trace formula)."""
    c = 0.5 * (np.trace(h.m) - 1.0)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _check_half_turn(theta):
    if theta > np.pi - HALF_TURN_MARGIN:
        raise NearHalfTurn(theta)


def spectral_decompose(h: InfiniteHomography) -> SpectralDecomposition:
    theta = rotation_angle_of(h)
    _check_half_turn(theta)
    w, v = np.linalg.eig(h.m)
    i_real = int(np.argmin(np.abs(w - 1.0)))
    rest = [i for i in range(3) if i != i_real]
    i_pair = max(rest, key=lambda i: w[i].imag)
    return SpectralDecomposition(v[:, i_real].astype(complex), v[:, i_pair].astype(complex), theta)


def _power_coefficients(theta, t):
    """Real ``(beta, gamma)`` with ``H^t = I + beta (H - I) + gamma (H - I)^2``.

    Solved from the eigenvalue equation for ``e^{i theta}``; the conjugate
    eigenvalue gives the conjugate equation and the eigenvalue 1 holds for
    any coefficients.
    """
    t = np.asarray(t, dtype=float)
    if theta < 1e-8:
        return t, 0.5 * t * (t - 1.0)
    # (e^{i t theta} - 1) / (e^{i theta} - 1) = rho * e^{i phi}
    rho = np.sin(0.5 * t * theta) / np.sin(0.5 * theta)
    phi = 0.5 * (t - 1.0) * theta
    gamma = rho * np.sin(phi) / np.sin(theta)
    beta = rho * np.cos(phi) - gamma * (np.cos(theta) - 1.0)
    return beta, gamma


def fractional_powers(h: InfiniteHomography, ts):
    """Stack of ``h^t`` for every ``t`` in ``ts``; shape ``(len(ts), 3, 3)``."""
    ts = np.asarray(ts, dtype=float)
    if np.any((ts < 0.0) | (ts > 1.0)):
        raise ValueError("t must lie in [0, 1]")
    theta = rotation_angle_of(h)
    _check_half_turn(theta)
    beta, gamma = _power_coefficients(theta, ts)
    n = h.m - np.eye(3)
    n2 = n @ n
    return (np.eye(3)[None] + beta[:, None, None] * n[None]
            + gamma[:, None, None] * n2[None])


def fractional_power(h: InfiniteHomography, t: float) -> InfiniteHomography:
    """``h`` raised to ``t`` along the geodesic: eigenvalues ``e^{+-i t theta}, 1``."""
    return InfiniteHomography(fractional_powers(h, [t])[0], normalized=True)


def align_metric_scale(h: Homography, reference: Correspondence, depth_ratio: float) -> Homography:
    """Rescale ``h`` so that ``h @ src`` has third component ``depth_ratio``.

    ``depth_ratio`` is ``z_current / z_desired`` of the reference point.
    """
    if not depth_ratio > 0:
        raise InvalidDepthRatio(f"depth ratio must be positive, got {depth_ratio}")
    w = (h.m @ reference.src)[2]
    if abs(w) < 1e-15:
        raise InvalidDepthRatio("reference maps to infinity under h")
    return Homography(h.m * (depth_ratio / w), METRIC)


def metric_scale_from_infinite(h: Homography, h_inf: InfiniteHomography) -> Homography:
    """Metric scale from image data alone.

    ``h_inf^-1 @ H_metric = I - a b^T`` has the eigenvalue 1 twice, so the
    repeated eigenvalue of ``h_inf^-1 @ h`` is the unknown scale factor.
    """
    w = np.linalg.eigvals(np.linalg.solve(h_inf.m, h.m))
    pairs = [(0, 1), (0, 2), (1, 2)]
    i, j = min(pairs, key=lambda p: abs(w[p[0]] - w[p[1]]))
    sigma = float(0.5 * (w[i] + w[j]).real)
    if abs(sigma) < 1e-15:
        raise SingularMatrix("repeated eigenvalue is zero")
    return Homography(h.m / sigma, METRIC)


def write_correspondences_csv(path, src, dst):
    src = dehomogenize(src)
    dst = dehomogenize(dst)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["u_src", "v_src", "u_dst", "v_dst"])
        for a, b in zip(src, dst):
            writer.writerow([repr(float(a[0])), repr(float(a[1])),
                             repr(float(b[0])), repr(float(b[1]))])


def read_correspondences_csv(path):
    """Return ``(src, dst)`` as ``(N, 2)`` arrays."""
    rows = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    return rows[:, 0:2], rows[:, 2:4]
