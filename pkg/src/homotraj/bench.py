"""Experiment runner: classical IBUVS vs. planned IBUVS-C / IBUVS-R in simulation."""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import homography as hg
from .errors import (Deadband, Diverged, HomotrajError, NearHalfTurn,
                     NonPositiveDepth, PlanningFailed)
from .geometry import CameraIntrinsics, Pose, rotation_angle
from .planner import (CameraPlanInput, FeatureSet, HandEyeTerm,
                      estimate_hand_eye_term, plan_camera_trajectory,
                      plan_effector_trajectory)
from .servo import (BroydenJacobian, RLSJacobian, TrackerState, control_step,
                    damped_pinv, init_jacobian, track_trajectory)
from .sim import (ObservationConfig, World, case_offset, default_hand_eye,
                  default_intrinsics, make_scene, oracle_hand_eye_term,
                  oracle_homography, oracle_infinite_homography,
                  path_length_accumulators)

log = logging.getLogger(__name__)

METHODS = ("ibuvs", "ibuvs-c", "ibuvs-r")

CASES = {
    "case1": ((-250.0, -100.0, 100.0), (10.0, -10.0, 60.0)),
    "case2": ((-350.0, -200.0, 100.0), (20.0, -20.0, 100.0)),
}


@dataclass
class ExperimentSpec:
    name: str = "custom"
    method: str = "ibuvs-r"
    translation_mm: tuple = (0.0, 0.0, 0.0)
    rotation_deg: tuple = (0.0, 0.0, 0.0)
    # controller
    gain: float = 3.0
    dt: float = 0.02
    v_max: float = 0.1
    w_max: float = 0.3
    damping: float = 1e-3
    estimator: str = "rls"
    forgetting: float = 0.9
    update_step: float = 2e-2
    excitation_m: float = 0.01
    excitation_deg: float = 2.0
    advance_tol: float = 2.0
    budget: int = 6000
    # planning
    samples: int = 50
    scale_method: str = "infinite"
    probe_deg: float = 10.0
    probe_axes: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0))
    half_turn_split: bool = False
    split_axis: tuple = (0.0, 0.0, 1.0)
    split_margin_deg: float = 10.0
    # observation
    noise: float = 0.3
    seed: int = 0
    strict_fov: bool = False
    static_frames: int = 100
    filter_alpha: float = 0.1
    fine_alpha: float = 0.02
    # termination
    eps_t: float = 1e-3
    eps_r_deg: float = 0.5
    fine_gain: float = 0.3
    fine_px: float = 3.0
    stop_window: int = 200
    stop_fraction: float = 0.5
    tight_px: float = 0.01
    divergence_factor: float = 4.0
    divergence_ticks: int = 50
    world: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.scale_method not in ("infinite", "depth"):
            raise ValueError(f"unknown scale method {self.scale_method!r}")
        if not (0.0 < self.filter_alpha <= 1.0 and 0.0 < self.fine_alpha <= 1.0):
            raise ValueError("filter gains must be in (0, 1]")
        if self.estimator not in ("broyden", "rls"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        self.translation_mm = tuple(float(x) for x in self.translation_mm)
        self.rotation_deg = tuple(float(x) for x in self.rotation_deg)
        self.probe_axes = tuple(tuple(float(c) for c in a) for a in self.probe_axes)
        self.split_axis = tuple(float(c) for c in self.split_axis)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        path = Path(path)
        text = path.read_text()
        if path.suffix in (".yaml", ".yml"):
            import yaml
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
        return cls.from_dict(data)

    @classmethod
    def case(cls, name: str, **overrides) -> "ExperimentSpec":
        t, r = CASES[name]
        return cls(name=name, translation_mm=t, rotation_deg=r, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


def build_world(spec: ExperimentSpec) -> World:
    """World from the optional ``world`` block of a spec.

    Schema (all keys optional)::

        intrinsics: {fx, fy, cx, cy, skew}
        plane:      {distance, normal}
        grid:       {width, n}
        bundles:    [[dx, dy, dz], ...]
        hand_eye:   {rotvec_deg: [..], translation_m: [..]}
        image_bounds: [u0, v0, u1, v1]
    """
    w = spec.world or {}
    intr = CameraIntrinsics(**w["intrinsics"]) if "intrinsics" in w else default_intrinsics()
    plane = w.get("plane", {})
    grid = w.get("grid", {})
    scene = make_scene(plane_distance=plane.get("distance", 0.6),
                       plane_normal=plane.get("normal", (0.0, 0.0, -1.0)),
                       grid_width=grid.get("width", 0.3), grid_n=grid.get("n", 3),
                       bundle_directions=w.get("bundles"))
    if "hand_eye" in w:
        he = w["hand_eye"]
        hand_eye = Pose.from_rotvec(np.deg2rad(he.get("rotvec_deg", (0, 0, 0))),
                                    he.get("translation_m", (0, 0, 0)))
    else:
        hand_eye = default_hand_eye()
    cfg = ObservationConfig(spec.noise, spec.seed, tuple(w.get("image_bounds", (0, 0, 640, 480))))
    return World.at_desired(scene, intr, hand_eye, cfg)


@dataclass
class ServoLog:
    ticks: list = field(default_factory=list)
    t_cursor: list = field(default_factory=list)
    rms_px: list = field(default_factory=list)
    qdot: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    effector_pos: list = field(default_factory=list)
    effector_rot: list = field(default_factory=list)
    camera_pos: list = field(default_factory=list)
    camera_rot: list = field(default_factory=list)

    def record_pose(self, world: World):
        fe = world.robot.effector_pose
        cam = world.robot.camera_pose
        self.effector_pos.append(fe.trans.copy())
        self.effector_rot.append(fe.rot.copy())
        self.camera_pos.append(cam.trans.copy())
        self.camera_rot.append(cam.rot.copy())

    def append(self, tick, t_cursor, rms, qdot, flags, world):
        self.ticks.append(tick)
        self.t_cursor.append(t_cursor)
        self.rms_px.append(rms)
        self.qdot.append(np.asarray(qdot, dtype=float).copy())
        self.flags.append("|".join(flags))
        self.record_pose(world)

    def accumulators(self, frame: str = "effector"):
        pos = self.effector_pos if frame == "effector" else self.camera_pos
        rot = self.effector_rot if frame == "effector" else self.camera_rot
        return path_length_accumulators(pos, rot)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["tick", "t_cursor", "rms_px", "vx", "vy", "vz", "wx", "wy", "wz",
                             "x", "y", "z", "flags"])
            for i, tick in enumerate(self.ticks):
                pos = self.effector_pos[i + 1]
                writer.writerow([tick, f"{self.t_cursor[i]:.6f}", f"{self.rms_px[i]:.6f}",
                                 *(f"{q:.9g}" for q in self.qdot[i]),
                                 *(f"{p:.9g}" for p in pos), self.flags[i]])


@dataclass
class RunReport:
    name: str
    method: str
    status: str
    converged: bool
    err_t: float
    err_r_deg: float
    effector_path_m: float
    effector_rot_deg: float
    camera_path_m: float
    camera_rot_deg: float
    ticks: int
    runtime_s: float
    seed: int
    planning: dict = field(default_factory=dict)
    message: str = ""
    log: ServoLog | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("log")
        return d


def _rel_frobenius(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def _metric(world: World, h_proj, h_inf, src: FeatureSet, scale_method: str):
    if scale_method == "infinite":
        return hg.metric_scale_from_infinite(h_proj, h_inf)
    # Depth-ratio route: the simulator hands out the depth ratio of one point.
    cam0 = world.robot.camera_pose.inverse()
    x1 = world.scene.target_points[0]
    ratio = cam0.apply(x1)[2] / x1[2]
    return hg.align_metric_scale(h_proj, hg.Correspondence(src.points[0], src.points[0]), ratio)


def _pair(a: FeatureSet, b: FeatureSet):
    b = a.aligned(b)
    return a.points, b.points


def _estimate_homographies(world, src_obs, dst_obs, scale_method):
    src, dst = _pair(src_obs.features, dst_obs.features)
    vsrc, vdst = _pair(src_obs.vanishing, dst_obs.vanishing)
    h_inf = hg.estimate_infinite_homography(vsrc, vdst)
    h = _metric(world, hg.estimate_homography_dlt(src, dst), h_inf, src_obs.features, scale_method)
    return h, h_inf


def _probe_hand_eye(world: World, spec: ExperimentSpec, desired: FeatureSet, h, current_obs):
    """Pure end-effector rotations about each probe axis; returns the hand-eye term."""
    probes = []
    for axis in spec.probe_axes:
        w = np.deg2rad(spec.probe_deg) * np.asarray(axis) / np.linalg.norm(axis)
        world.step(np.r_[0.0, 0.0, 0.0, w], 1.0)
        probe_obs = world.observe_static(spec.static_frames)
        world.step(np.r_[0.0, 0.0, 0.0, -w], 1.0)
        src, dst = _pair(current_obs.features, probe_obs.features)
        vsrc, vdst = _pair(current_obs.vanishing, probe_obs.vanishing)
        h_r_inf = hg.estimate_infinite_homography(vsrc, vdst)
        h_r = hg.metric_scale_from_infinite(hg.estimate_homography_dlt(src, dst), h_r_inf)
        probes.append((h_r, h_r_inf))
    return estimate_hand_eye_term(probes, desired, h)


def _plan(world: World, spec: ExperimentSpec, desired_obs, planning: dict):
    current_obs = world.observe_static(spec.static_frames)
    desired = desired_obs.features
    h, h_inf = _estimate_homographies(world, desired_obs, current_obs, spec.scale_method)
    inp = CameraPlanInput(h, h_inf, desired, desired.aligned(current_obs.features))
    gt_h = oracle_homography(world.scene, world.desired_in_current(), world.intrinsics)
    gt_inf = oracle_infinite_homography(world.desired_in_current().rot, world.intrinsics)
    planning.update(h=h.to_list(), h_inf=h_inf.to_list(),
                    h_rel_err=_rel_frobenius(h.m, gt_h.m),
                    h_inf_rel_err=_rel_frobenius(h_inf.m, gt_inf.m),
                    theta_deg=float(np.rad2deg(hg.rotation_angle_of(h_inf))))
    theta = hg.rotation_angle_of(h_inf)
    if spec.half_turn_split and not planning.get("split") and theta > np.pi - np.deg2rad(spec.split_margin_deg):
        # Estimated angles near pi are too noisy to trust the primitive's guard alone.
        raise NearHalfTurn(theta)
    if spec.method == "ibuvs-c":
        return plan_camera_trajectory(inp, spec.samples)
    tau = _probe_hand_eye(world, spec, desired, h, current_obs)
    gt_tau = oracle_hand_eye_term(world.scene, world.robot.hand_eye, world.intrinsics)
    planning.update(tau=tau.tau.tolist(), tau_oracle=gt_tau.tau.tolist(),
                    tau_rel_err=float(np.linalg.norm(tau.tau - gt_tau.tau) / np.linalg.norm(gt_tau.tau)))
    return plan_effector_trajectory(inp, tau, spec.samples)


def _excite(world: World, spec: ExperimentSpec, y0: FeatureSet):
    """Small +- moves along each twist coordinate; returns ``(dq, dy)`` pairs."""
    pairs = []
    amp = [spec.excitation_m] * 3 + [np.deg2rad(spec.excitation_deg)] * 3
    for i in range(6):
        for sign in (1.0, -1.0):
            dq = np.zeros(6)
            dq[i] = sign * amp[i]
            world.step(dq, 1.0)
            y = world.observe_static(spec.static_frames).features
            world.step(-dq, 1.0)
            pairs.append((dq, y0.aligned(y).vector - y0.vector))
    return pairs


def _rotate_open_loop(world: World, spec: ExperimentSpec, logbook: ServoLog, rotvec, tick0: int):
    """Constant-rate effector rotation at the angular speed limit; returns ticks used."""
    angle = float(np.linalg.norm(rotvec))
    n = int(np.ceil(angle / (spec.w_max * spec.dt)))
    w = np.asarray(rotvec) / (n * spec.dt)
    for k in range(n):
        qdot = np.r_[0.0, 0.0, 0.0, w]
        world.step(qdot, spec.dt)
        logbook.append(tick0 + k, 0.0, float("nan"), qdot, ("split",), world)
    return n


def run_experiment(spec: ExperimentSpec) -> RunReport:
    """Full pipeline for one method and initial pose; deterministic given ``spec.seed``."""
    start = time.perf_counter()
    world = build_world(spec)
    desired_obs = world.observe_static(spec.static_frames)
    desired = desired_obs.features
    world.move_to_offset(case_offset(spec.translation_mm, spec.rotation_deg))
    logbook = ServoLog()
    logbook.record_pose(world)
    planning: dict = {}
    status, message = "not-converged", ""
    tick = 0

    def report(status, message=""):
        err_t, err_r = world.errors()
        eff = logbook.accumulators("effector")
        cam = logbook.accumulators("camera")
        converged = err_t < spec.eps_t and np.rad2deg(err_r) < spec.eps_r_deg
        if status == "converged" and not converged:
            status = "not-converged"
        return RunReport(spec.name, spec.method, status, bool(converged), err_t,
                         float(np.rad2deg(err_r)), eff[0], float(np.rad2deg(eff[1])),
                         cam[0], float(np.rad2deg(cam[1])), len(logbook.ticks),
                         time.perf_counter() - start, spec.seed, planning, message, logbook)

    try:
        trajectory = None
        if spec.method != "ibuvs":
            try:
                trajectory = _plan(world, spec, desired_obs, planning)
            except NearHalfTurn as exc:
                if not spec.half_turn_split:
                    raise
                log.info("near half-turn (%s); pre-rotating by pi/2 before planning", exc)
                axis = np.asarray(spec.split_axis, dtype=float)
                tick += _rotate_open_loop(world, spec, logbook,
                                          0.5 * np.pi * axis / np.linalg.norm(axis), tick)
                planning["split"] = True
                trajectory = _plan(world, spec, desired_obs, planning)
    except (HomotrajError, ValueError) as exc:
        return report("planning-failed", f"{type(exc).__name__}: {exc}")

    try:
        y = desired.aligned(world.observe_static(spec.static_frames).features)
        j0 = init_jacobian(_excite(world, spec, y))
        planning["jacobian_init_residual_px"] = j0.residual
        est = (BroydenJacobian(j0, spec.forgetting, spec.update_step) if spec.estimator == "broyden"
               else RLSJacobian(j0, forgetting=spec.forgetting, deadband=spec.update_step))
        mode = "classical-goal" if trajectory is None else "track-planned"
        tracker = TrackerState(desired, trajectory, 0, mode)
        rms0 = max(desired.rms_distance(y), 1e-9)
        anchor, acc = y, np.zeros(6)
        far = 0
        fine = False
        residuals = deque(maxlen=spec.stop_window)
        stop_t = spec.stop_fraction * spec.eps_t
        stop_r = spec.stop_fraction * np.deg2rad(spec.eps_r_deg)
        for _ in range(spec.budget):
            target = track_trajectory(tracker, y, spec.advance_tol)
            if not fine and tracker.finished and desired.rms_distance(y) < spec.fine_px:
                # Fresh local Jacobian for the final approach; held fixed afterwards.
                fine = True
                y = desired.aligned(world.observe_static(spec.static_frames).features)
                est.est = init_jacobian(_excite(world, spec, y))
                planning["jacobian_fine_residual_px"] = est.est.residual
            cmd = control_step(est.est, y, target, spec.fine_gain if fine else spec.gain,
                               damping=spec.damping, v_max=spec.v_max, w_max=spec.w_max)
            world.step(cmd.qdot, spec.dt)
            obs = world.observe()
            if obs.lost or len(obs.features) != len(desired):
                raise Diverged(f"features lost: {obs.lost}")
            if spec.strict_fov and obs.out_of_bounds:
                raise Diverged(f"features left the image: {obs.out_of_bounds}")
            raw = desired.aligned(obs.features)
            dq = cmd.qdot * spec.dt
            acc = acc + dq
            # Predict with the current Jacobian, correct toward the measurement.
            pred = y.vector + est.est.j @ dq
            alpha = spec.fine_alpha if fine else spec.filter_alpha
            y_new = FeatureSet((pred + alpha * (raw.vector - pred)).reshape(-1, 2), desired.labels)
            if fine:
                # Near the goal the secant innovations are mostly noise: hold the estimate.
                anchor, acc = raw, np.zeros(6)
            else:
                try:
                    est.update(acc, raw.vector - anchor.vector)
                    anchor, acc = raw, np.zeros(6)
                except Deadband:
                    pass
            rms = desired.rms_distance(y_new)
            logbook.append(tick, tracker.t_cursor, rms, cmd.qdot, cmd.flags + (("fine",) if fine else ()), world)
            tick += 1
            y = y_new
            far = far + 1 if rms > spec.divergence_factor * rms0 else 0
            if far >= spec.divergence_ticks:
                raise Diverged(f"feature error above {spec.divergence_factor}x initial "
                               f"for {spec.divergence_ticks} ticks")
            if not np.all(np.isfinite(est.est.j)):
                raise Diverged("Jacobian estimate became non-finite")
            if not tracker.finished:
                continue
            if rms < spec.tight_px:
                status = "converged"
                break
            # Pose residual predicted by the estimated Jacobian, averaged over a window.
            residuals.append(damped_pinv(est.est.j, spec.damping)[0] @ (desired.vector - y.vector))
            if len(residuals) == residuals.maxlen:
                mean = np.mean(residuals, axis=0)
                if np.linalg.norm(mean[:3]) < stop_t and np.linalg.norm(mean[3:]) < stop_r:
                    status = "converged"
                    break
        else:
            message = f"step budget of {spec.budget} ticks exhausted"
    except (Diverged, NonPositiveDepth) as exc:
        return report("diverged", f"{type(exc).__name__}: {exc}")
    except ValueError as exc:
        return report("diverged", f"{type(exc).__name__}: {exc}")
    return report(status, message)


def _run_safe(spec: ExperimentSpec) -> RunReport:
    return run_experiment(spec)


def run_suite(specs, jobs: int = 1, out_dir=None):
    """Run independent experiments; returns ``(reports, table_text)``."""
    specs = list(specs)
    if not specs:
        raise ValueError("empty suite: at least one experiment spec is required")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_safe, specs))
    else:
        reports = [run_experiment(s) for s in specs]
    table = summary_table(reports)
    if out_dir is not None:
        write_outputs(reports, out_dir, table)
    return reports, table


def summary_table(reports) -> str:
    header = (f"{'scenario':<10} {'method':<8} {'status':<15} {'eff_m':>7} {'eff_deg':>8} "
              f"{'cam_m':>7} {'cam_deg':>8} {'err_mm':>8} {'err_deg':>8} {'ticks':>6}")
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(f"{r.name:<10} {r.method:<8} {r.status:<15} {r.effector_path_m:7.3f} "
                     f"{r.effector_rot_deg:8.2f} {r.camera_path_m:7.3f} {r.camera_rot_deg:8.2f} "
                     f"{1000 * r.err_t:8.3f} {r.err_r_deg:8.3f} {r.ticks:6d}")
    return "\n".join(lines)


def write_outputs(reports, out_dir, table: str | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in reports:
        stem = f"{r.name}_{r.method}_s{r.seed}"
        (out / f"{stem}.json").write_text(json.dumps(r.to_dict(), indent=2))
        if r.log is not None:
            r.log.to_csv(out / f"{stem}.csv")
    if table is not None:
        (out / "summary.txt").write_text(table + "\n")


def noise_sweep(spec: ExperimentSpec, seeds) -> dict:
    """Monte-Carlo over seeds: convergence rate and path-length dispersion."""
    reports, _ = run_suite([ExperimentSpec.from_dict({**spec.to_dict(), "seed": int(s)}) for s in seeds])
    eff = np.array([r.effector_path_m for r in reports])
    rot = np.array([r.effector_rot_deg for r in reports])
    return {
        "runs": len(reports),
        "convergence_rate": float(np.mean([r.converged for r in reports])),
        "effector_path_m_mean": float(eff.mean()), "effector_path_m_std": float(eff.std()),
        "effector_rot_deg_mean": float(rot.mean()), "effector_rot_deg_std": float(rot.std()),
        "reports": reports,
    }
