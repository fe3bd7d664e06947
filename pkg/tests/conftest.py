import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from homotraj.geometry import CameraIntrinsics


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def intr():
    return CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0)


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * rng.uniform(0.0, max_angle)).as_matrix()


def hom(rot, trans):
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = trans
    return m


def project_k(k, pts):
    q = pts @ k.T
    return q[:, :2] / q[:, 2:3]


class PlanCase:
    """Independent 3D world for planner oracles.

    The desired camera frame C1 is the world frame. ``c0`` is the current
    camera pose, ``x`` the hand-eye (C in F) as 4x4 matrices.
    """

    def __init__(self, k, normal, dist, pts, c0, x):
        self.k, self.normal, self.dist, self.pts, self.c0, self.x = k, normal, dist, pts, c0, x
        self.f1 = np.linalg.inv(x)
        self.f0 = c0 @ np.linalg.inv(x)
        self.m = np.linalg.inv(self.f0) @ self.f1      # F1 relative to F0

    @property
    def motion(self):
        """C1 relative to C0."""
        return np.linalg.inv(self.c0)

    def h(self):
        rel = self.motion
        r, t = rel[:3, :3], rel[:3, 3]
        return self.k @ (r - np.outer(t, self.normal) / self.dist) @ np.linalg.inv(self.k)

    def h_inf(self):
        return self.k @ self.motion[:3, :3] @ np.linalg.inv(self.k)

    def tau(self):
        z = self.pts[:, 2]
        z_ref = 1.0 / np.mean(1.0 / z)
        r_fc, t_fc = self.x[:3, :3], self.x[:3, 3]
        return self.k @ r_fc.T @ t_fc / z_ref, z_ref / z

    def view(self, cam):
        local = (np.linalg.inv(cam) @ np.c_[self.pts, np.ones(len(self.pts))].T).T[:, :3]
        return local

    def desired_px(self):
        return project_k(self.k, self.pts)

    def current_px(self):
        return project_k(self.k, self.view(self.c0))

    def camera_path(self, ts):
        rel = self.motion
        rv = Rotation.from_matrix(rel[:3, :3]).as_rotvec()
        out = []
        for t in ts:
            ct = self.c0 @ hom(Rotation.from_rotvec(t * rv).as_matrix(), t * rel[:3, 3])
            out.append(self.view(ct))
        return np.array(out)

    def effector_path(self, ts):
        rv = Rotation.from_matrix(self.m[:3, :3]).as_rotvec()
        out = []
        for t in ts:
            ft = self.f0 @ hom(Rotation.from_rotvec(t * rv).as_matrix(), t * self.m[:3, 3])
            out.append(self.view(ft @ self.x))
        return np.array(out)


def random_plan_case(rng, k, max_angle=np.deg2rad(170.0), max_trans=0.5, min_depth=0.05):
    """Rejection-sample a scene whose points stay in front of the camera on both paths."""
    ts = np.linspace(0.0, 1.0, 50)
    while True:
        normal = np.array([0.0, 0.0, -1.0]) + 0.3 * rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        dist = rng.uniform(0.5, 1.5)
        # points: rays through the image, intersected with the plane
        rays = np.c_[rng.uniform(-0.4, 0.4, size=(8, 2)), np.ones(8)]
        depth = -dist / (rays @ normal)
        if np.any(depth <= 0.2):
            continue
        pts = rays * depth[:, None]
        t0 = rng.normal(size=3)
        t0 *= rng.uniform(0.0, max_trans) / np.linalg.norm(t0)
        c0 = hom(random_rotation(rng, max_angle), t0)
        x = hom(random_rotation(rng, np.deg2rad(30.0)), rng.uniform(-0.1, 0.1, size=3))
        case = PlanCase(k, normal, dist, pts, c0, x)
        if np.linalg.norm(Rotation.from_matrix(case.m[:3, :3]).as_rotvec()) > max_angle:
            continue
        if case.camera_path(ts)[..., 2].min() < min_depth or case.effector_path(ts)[..., 2].min() < min_depth:
            continue
        return case
