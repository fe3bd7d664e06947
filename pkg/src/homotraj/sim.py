"""Ground-truth world: planar target, kinematic stage, hidden hand-eye, pinhole camera.

The world frame coincides with the desired camera frame {C1}, so the target
plane ``n . X + d = 0`` is stored directly in that frame. Everything here may
use intrinsics and the hand-eye transform; the planner and controller never
see them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonPositiveDepth
from .geometry import (CameraIntrinsics, Pose, compose_hand_eye, rotation_angle,
                       rotation_from_rotvec)
from .homography import METRIC, Homography, InfiniteHomography
from .planner import FeatureSet, HandEyeTerm

DEFAULT_BOUNDS = (0.0, 0.0, 640.0, 480.0)


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0)


def default_hand_eye() -> Pose:
    """{C} relative to {F}: 15 deg about (1, 1, 0)/sqrt(2), offset (5, -3, 8) cm."""
    axis = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    return Pose.from_rotvec(np.deg2rad(15.0) * axis, [0.05, -0.03, 0.08])


@dataclass(frozen=True)
class Scene:
    plane_normal: np.ndarray
    plane_distance: float
    target_points: np.ndarray          # (N, 3) in the desired camera frame
    bundle_directions: np.ndarray      # (B, 3) unit vectors
    bundle_anchors: np.ndarray         # (B, L, 3): L parallel lines per bundle

    def __post_init__(self):
        n = np.asarray(self.plane_normal, dtype=float)
        object.__setattr__(self, "plane_normal", n / np.linalg.norm(n))
        object.__setattr__(self, "target_points", np.asarray(self.target_points, dtype=float))
        d = np.asarray(self.bundle_directions, dtype=float)
        object.__setattr__(self, "bundle_directions", d / np.linalg.norm(d, axis=1, keepdims=True))
        object.__setattr__(self, "bundle_anchors", np.asarray(self.bundle_anchors, dtype=float))
        resid = self.target_points @ self.plane_normal + self.plane_distance
        if np.max(np.abs(resid)) > 1e-12:
            raise ValueError("target points are not on the plane")
        if len(self.target_points) < 4:
            raise ValueError("need at least 4 target points")
        if len(d) < 4:
            raise ValueError("need at least 4 line bundles")
        dots = np.abs(self.bundle_directions @ self.bundle_directions.T)
        np.fill_diagonal(dots, 0.0)
        if np.max(dots) > 1.0 - 1e-9:
            raise ValueError("bundle directions must be pairwise non-parallel")

    @property
    def labels(self):
        return tuple(f"p{i}" for i in range(len(self.target_points)))

    @property
    def vp_labels(self):
        return tuple(f"vp{i}" for i in range(len(self.bundle_directions)))


def make_scene(plane_distance=0.6, grid_width=0.3, grid_n=3, plane_normal=(0.0, 0.0, -1.0),
               bundle_directions=None) -> Scene:
    """Square grid of target points centred on the optical axis of the desired view.

    Bundle directions default to six forward-pointing directions; directions in
    a fronto-parallel target plane would image to points at infinity.
    """
    n = np.asarray(plane_normal, dtype=float)
    n = n / np.linalg.norm(n)
    center = -plane_distance * n
    # In-plane basis.
    a = np.cross(n, [0.0, 1.0, 0.0])
    if np.linalg.norm(a) < 1e-9:
        a = np.cross(n, [1.0, 0.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    ticks = np.linspace(-grid_width / 2, grid_width / 2, grid_n)
    pts = np.array([center + x * a + y * b for y in ticks for x in ticks])
    if bundle_directions is None:
        bundle_directions = [(0.3, 0.3, 1.0), (-0.3, 0.3, 1.0), (-0.3, -0.3, 1.0),
                             (0.3, -0.3, 1.0), (0.5, 0.0, 1.0), (0.0, -0.5, 1.0)]
    dirs = np.asarray(bundle_directions, dtype=float)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    anchors = np.stack([np.stack([center + 0.1 * a + 0.05 * i * b, center - 0.1 * a - 0.05 * i * b])
                        for i in range(len(dirs))])
    return Scene(n, float(plane_distance), pts, dirs, anchors)


@dataclass(frozen=True)
class RobotState:
    effector_pose: Pose        # {F} in world
    hand_eye: Pose             # {C} relative to {F}

    @property
    def camera_pose(self) -> Pose:
        return self.effector_pose @ self.hand_eye


@dataclass(frozen=True)
class ObservationConfig:
    pixel_noise_sigma: float = 0.3
    seed: int = 0
    image_bounds: tuple = DEFAULT_BOUNDS

    def __post_init__(self):
        if self.pixel_noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")


@dataclass(frozen=True)
class Observation:
    features: FeatureSet
    vanishing: FeatureSet | None
    out_of_bounds: tuple = ()
    lost: tuple = ()


def _in_bounds(points, bounds):
    u0, v0, u1, v1 = bounds
    return (points[:, 0] >= u0) & (points[:, 0] <= u1) & (points[:, 1] >= v0) & (points[:, 1] <= v1)


def observe(scene: Scene, robot: RobotState, intrinsics: CameraIntrinsics,
            cfg: ObservationConfig, rng: np.random.Generator | None = None) -> Observation:
    """Project target points and vanishing points with optional Gaussian pixel noise.

    Points behind the camera are reported in ``lost`` and left out of the
    feature set; fewer than 4 visible points raises :class:`NonPositiveDepth`.
    """
    cam = robot.camera_pose.inverse()
    k = intrinsics.K
    sigma = cfg.pixel_noise_sigma
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    pc = cam.apply(scene.target_points)
    visible = pc[:, 2] > 0.0
    labels = np.array(scene.labels)
    if visible.sum() < 4:
        raise NonPositiveDepth(f"only {int(visible.sum())} target points in front of the camera")
    q = pc[visible] @ k.T
    uv = q[:, :2] / q[:, 2:3]
    noise = rng.normal(0.0, sigma, size=(len(scene.target_points), 2)) if sigma > 0 else None
    if noise is not None:
        uv = uv + noise[visible]
    features = FeatureSet(uv, tuple(labels[visible]))
    oob = tuple(labels[visible][~_in_bounds(uv, cfg.image_bounds)])

    dc = scene.bundle_directions @ cam.rot.T
    finite = np.abs(dc[:, 2]) > 1e-9
    vanishing = None
    if finite.sum() >= 4:
        qv = dc[finite] @ k.T
        vp = qv[:, :2] / qv[:, 2:3]
        if sigma > 0:
            vp = vp + rng.normal(0.0, sigma, size=(len(scene.bundle_directions), 2))[finite]
        vanishing = FeatureSet(vp, tuple(np.array(scene.vp_labels)[finite]))
    return Observation(features, vanishing, oob, tuple(labels[~visible]))


def oracle_homography(scene: Scene, desired_in_current: Pose, intrinsics: CameraIntrinsics) -> Homography:
    """Metric ``K (R - t n^T / d) K^-1`` mapping desired-image to current-image pixels.

    ``desired_in_current`` is {C1} relative to {C0}: ``x0 = R x1 + t``.
    """
    r, t = desired_in_current.rot, desired_in_current.trans
    m = intrinsics.K @ (r - np.outer(t, scene.plane_normal) / scene.plane_distance) @ intrinsics.K_inv
    return Homography(m, METRIC)


def oracle_infinite_homography(rotation, intrinsics: CameraIntrinsics) -> InfiniteHomography:
    return InfiniteHomography(intrinsics.K @ np.asarray(rotation) @ intrinsics.K_inv, normalized=True)


def oracle_hand_eye_term(scene: Scene, hand_eye: Pose, intrinsics: CameraIntrinsics) -> HandEyeTerm:
    """Ground-truth ``K R_cf t_fc / z_ref`` with per-feature depth weights.

    ``z_ref`` is the harmonic mean of the desired-view depths of the target
    points, matching the normalization used by the estimator (mean weight 1).
    """
    t_c = intrinsics.K @ hand_eye.rot.T @ hand_eye.trans
    z = scene.target_points[:, 2]
    z_ref = 1.0 / np.mean(1.0 / z)
    return HandEyeTerm(t_c / z_ref, z_ref / z)


def apply_command(robot: RobotState, qdot, dt: float) -> RobotState:
    """Integrate an end-effector twist ``(v, w)`` given in the end-effector frame.

    Explicit Euler: ``p += R v dt`` using the pre-step orientation, then
    ``R <- R exp(w dt)``. The camera follows rigidly through the hand-eye pose.
    """
    qdot = np.asarray(getattr(qdot, "qdot", qdot), dtype=float)
    pose = robot.effector_pose
    trans = pose.trans + pose.rot @ qdot[:3] * dt
    rot = pose.rot @ rotation_from_rotvec(qdot[3:] * dt)
    return replace(robot, effector_pose=Pose(rot, trans))


def pose_errors(effector_pose: Pose, desired_effector_pose: Pose):
    """Translation error (m) and rotation error (rad) of the end-effector."""
    err_t = float(np.linalg.norm(effector_pose.trans - desired_effector_pose.trans))
    err_r = rotation_angle(effector_pose.rot.T @ desired_effector_pose.rot)
    return err_t, err_r


def path_length_accumulators(positions, rotations):
    """Summed straight-segment length and summed per-step geodesic angle."""
    positions = np.asarray(positions, dtype=float)
    rotations = np.asarray(rotations, dtype=float)
    if len(positions) < 2:
        return 0.0, 0.0
    dist = float(np.sum(np.linalg.norm(np.diff(positions, axis=0), axis=1)))
    rel = np.einsum("nji,njk->nik", rotations[:-1], rotations[1:])
    cos = np.clip(0.5 * (np.trace(rel, axis1=1, axis2=2) - 1.0), -1.0, 1.0)
    # arccos loses precision for tiny steps; use the skew part as well.
    sin = 0.5 * np.linalg.norm(np.stack([rel[:, 2, 1] - rel[:, 1, 2],
                                         rel[:, 0, 2] - rel[:, 2, 0],
                                         rel[:, 1, 0] - rel[:, 0, 1]], axis=1), axis=1)
    angle = float(np.sum(np.arctan2(sin, cos)))
    return dist, angle


@dataclass
class World:
    """Mutable simulation state for one experiment (clone per experiment)."""

    scene: Scene
    intrinsics: CameraIntrinsics
    robot: RobotState
    cfg: ObservationConfig = field(default_factory=ObservationConfig)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.cfg.seed)
        self.desired_effector_pose = self.robot.hand_eye.inverse()

    @classmethod
    def at_desired(cls, scene=None, intrinsics=None, hand_eye=None, cfg=None) -> "World":
        hand_eye = default_hand_eye() if hand_eye is None else hand_eye
        robot = RobotState(hand_eye.inverse(), hand_eye)
        return cls(scene or make_scene(), intrinsics or default_intrinsics(), robot,
                   cfg or ObservationConfig())

    def move_to_offset(self, offset: Pose):
        """Place {F} at ``offset`` relative to the desired end-effector frame."""
        self.robot = replace(self.robot, effector_pose=self.desired_effector_pose @ offset)

    def observe(self) -> Observation:
        return observe(self.scene, self.robot, self.intrinsics, self.cfg, self.rng)

    def observe_static(self, frames: int = 1) -> Observation:
        """Mean of ``frames`` observations taken without moving."""
        obs = [self.observe() for _ in range(max(frames, 1))]
        if len(obs) == 1:
            return obs[0]
        first = obs[0]
        feats = FeatureSet(np.mean([first.features.aligned(o.features).points for o in obs], axis=0),
                           first.features.labels)
        vps = None
        if first.vanishing is not None:
            vps = FeatureSet(np.mean([first.vanishing.aligned(o.vanishing).points for o in obs], axis=0),
                             first.vanishing.labels)
        return Observation(feats, vps, first.out_of_bounds, first.lost)

    def step(self, qdot, dt: float):
        self.robot = apply_command(self.robot, qdot, dt)

    def errors(self):
        return pose_errors(self.robot.effector_pose, self.desired_effector_pose)

    def desired_in_current(self) -> Pose:
        """{C1} relative to the current camera frame {C0}."""
        return self.robot.camera_pose.inverse()

    def effector_motion_to_desired(self) -> Pose:
        """{F1} relative to the current end-effector frame {F0}."""
        return self.robot.effector_pose.inverse() @ self.desired_effector_pose

    def camera_motion_check(self) -> float:
        """Discrepancy between hand-eye composition and the direct frame chain."""
        direct = self.desired_in_current()
        chained = compose_hand_eye(self.effector_motion_to_desired(), self.robot.hand_eye)
        return float(max(np.max(np.abs(direct.rot - chained.rot)),
                         np.max(np.abs(direct.trans - chained.trans))))


def case_offset(translation_mm, rotvec_deg) -> Pose:
    """Initial end-effector pose relative to the desired one from mm / degree rows."""
    return Pose.from_rotvec(np.deg2rad(np.asarray(rotvec_deg, dtype=float)),
                            np.asarray(translation_mm, dtype=float) / 1000.0)


def rotation_angle_deg(r) -> float:
    return float(np.rad2deg(rotation_angle(r)))
