import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from homotraj.errors import Deadband, InsufficientExcitation
from homotraj.planner import FeatureSet, PlannedImageTrajectory
from homotraj.servo import (BroydenJacobian, JacobianEstimate, RLSJacobian, TrackerState,
                            broyden_update, clamp_twist, control_step, damped_pinv,
                            init_jacobian, track_trajectory)
from homotraj.sim import ObservationConfig, World, case_offset


def numeric_jacobian(world: World, eps=1e-6):
    """Central-difference image Jacobian of the noise-free simulator."""
    cols = []
    for i in range(6):
        dq = np.zeros(6)
        dq[i] = eps
        world.step(dq, 1.0)
        plus = world.observe().features.vector
        world.step(-2 * dq, 1.0)
        minus = world.observe().features.vector
        world.step(dq, 1.0)
        cols.append((plus - minus) / (2 * eps))
    return np.column_stack(cols)


def quiet_world(noise=0.0, seed=0):
    return World.at_desired(cfg=ObservationConfig(noise, seed))


def test_jacobian_shape_validation():
    with pytest.raises(ValueError):
        JacobianEstimate(np.zeros((8, 5)))
    with pytest.raises(ValueError):
        JacobianEstimate(np.zeros((7, 6)))
    with pytest.raises(ValueError):
        JacobianEstimate(np.full((8, 6), np.nan))


def test_init_jacobian_exact(rng):
    j0 = rng.normal(size=(8, 6))
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    est = init_jacobian([(q[:, i], j0 @ q[:, i]) for i in range(6)])
    np.testing.assert_allclose(est.j, j0, atol=1e-9)
    assert est.residual < 1e-9


def test_init_jacobian_needs_six_independent_probes(rng):
    j0 = rng.normal(size=(8, 6))
    probes = [(np.eye(6)[i], j0[:, i]) for i in range(5)]
    with pytest.raises(InsufficientExcitation):
        init_jacobian(probes)
    with pytest.raises(InsufficientExcitation):
        init_jacobian(probes + [(probes[0][0] * 2, 2 * probes[0][1])])


def test_init_jacobian_noisy_simulator_held_out_probe():
    # Monte-Carlo oracle: 6 noisy probes, prediction checked on a 7th
    world = quiet_world(noise=0.5, seed=3)
    residuals = []
    for trial in range(20):
        rng = np.random.default_rng(trial)
        y0 = world.observe().features.vector
        pairs = []
        for i in range(7):
            dq = np.zeros(6)
            dq[i % 6] = 0.01 if i % 6 < 3 else np.deg2rad(2.0)
            if i == 6:
                dq = rng.normal(size=6) * [0.01, 0.01, 0.01, 0.03, 0.03, 0.03]
            world.step(dq, 1.0)
            pairs.append((dq, world.observe().features.vector - y0))
            world.step(-dq, 1.0)
        est = init_jacobian(pairs[:6])
        dq, dy = pairs[6]
        residuals.append(np.sqrt(np.mean((dy - est.j @ dq) ** 2)))
    assert np.median(residuals) < 2.0


def test_broyden_examples(rng):
    est = JacobianEstimate(rng.normal(size=(8, 6)))
    dq = rng.normal(size=6)
    same = broyden_update(est, dq, est.j @ dq, forgetting=0.7)
    np.testing.assert_allclose(same.j, est.j, atol=1e-14)
    dy = rng.normal(size=8)
    full = broyden_update(est, dq, dy, forgetting=1.0)
    np.testing.assert_allclose(full.j @ dq, dy, atol=1e-12)
    assert full.updates == 1
    with pytest.raises(Deadband):
        broyden_update(est, np.full(6, 1e-8), dy)
    with pytest.raises(ValueError):
        broyden_update(est, dq, dy, forgetting=0.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 1.0))
def test_broyden_secant_equation(seed, lam):
    rng = np.random.default_rng(seed)
    est = JacobianEstimate(rng.normal(size=(18, 6)))
    for _ in range(5):
        dq = rng.normal(size=6) * 10 ** rng.uniform(-4, 0)
        dy = rng.normal(size=18)
        new = broyden_update(est, dq, dy, forgetting=lam)
        expected = lam * dy + (1 - lam) * (est.j @ dq)
        scale = max(1.0, np.abs(expected).max())
        assert np.max(np.abs(new.j @ dq - expected)) < 1e-10 * scale
        est = new


def test_broyden_on_simulator_plant_improves():
    world = quiet_world()
    world.move_to_offset(case_offset((-40, 20, 30), (5, -5, 10)))
    rng = np.random.default_rng(1)
    est = BroydenJacobian(JacobianEstimate(numeric_jacobian(world) + 50 * rng.normal(size=(18, 6))))
    errors = []
    y = world.observe().features.vector
    for _ in range(200):
        dq = rng.normal(size=6) * [3e-3, 3e-3, 3e-3, 1e-2, 1e-2, 1e-2]
        world.step(dq, 1.0)
        y_new = world.observe().features.vector
        errors.append(np.linalg.norm(y_new - y - est.est.j @ dq))
        est.update(dq, y_new - y)
        y = y_new
    windows = np.median(np.reshape(errors, (4, 50)), axis=1)
    assert np.all(np.diff(windows) < 0)


def test_rls_tracks_linear_plant(rng):
    j0 = rng.normal(size=(8, 6))
    est = RLSJacobian(JacobianEstimate(np.zeros((8, 6))), forgetting=0.95)
    for _ in range(200):
        dq = rng.normal(size=6)
        est.update(dq, j0 @ dq)
    np.testing.assert_allclose(est.est.j, j0, atol=1e-6)
    with pytest.raises(Deadband):
        est.update(np.zeros(6), np.zeros(8))


def _fs(vec):
    return FeatureSet(np.asarray(vec, float).reshape(-1, 2))


def test_control_step_examples(rng):
    est = JacobianEstimate(np.eye(8)[:, :6])
    cur = _fs(rng.normal(size=8))
    zero = control_step(est, cur, cur, 1.0)
    np.testing.assert_array_equal(zero.qdot, np.zeros(6))
    # identity-like J, gain 1, undamped: qdot equals the error
    err = np.r_[rng.normal(size=6) * 1e-2, 0.0, 0.0]
    cmd = control_step(est, cur, _fs(cur.vector + err), 1.0, damping=0.0)
    np.testing.assert_allclose(cmd.qdot, err[:6], atol=1e-14)
    with pytest.raises(ValueError):
        control_step(est, cur, cur, 0.0)


def test_control_step_flags(rng):
    j = rng.normal(size=(8, 6))
    j[:, 5] = 1e-9 * j[:, 0]
    cur = _fs(rng.normal(size=8))
    cmd = control_step(JacobianEstimate(j), cur, _fs(cur.vector + 100.0), 1.0)
    assert "singular" in cmd.flags
    assert "clamped" in cmd.flags
    assert np.linalg.norm(cmd.qdot[:3]) <= 0.1 + 1e-12 and np.linalg.norm(cmd.qdot[3:]) <= 0.3 + 1e-12


def test_clamp_preserves_direction():
    q = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.1])
    out, clamped = clamp_twist(q)
    assert clamped
    np.testing.assert_allclose(out / np.linalg.norm(out), q / np.linalg.norm(q))
    same, clamped = clamp_twist(q * 1e-3)
    assert not clamped
    np.testing.assert_array_equal(same, q * 1e-3)


def test_damped_pinv_limit(rng):
    j = rng.normal(size=(10, 6))
    np.testing.assert_allclose(damped_pinv(j, 0.0)[0], np.linalg.pinv(j), atol=1e-12)


def test_control_step_permutation_invariance(rng):
    n = 6
    j = rng.normal(size=(2 * n, 6))
    cur = rng.normal(size=(n, 2)) * 100
    tgt = cur + rng.normal(size=(n, 2))
    labels = tuple(f"f{i}" for i in range(n))
    a = control_step(JacobianEstimate(j), FeatureSet(cur, labels), FeatureSet(tgt, labels), 2.0)
    perm = rng.permutation(n)
    rows = np.ravel(np.column_stack([2 * perm, 2 * perm + 1]))
    plabels = tuple(labels[i] for i in perm)
    b = control_step(JacobianEstimate(j[rows]), FeatureSet(cur[perm], plabels),
                     FeatureSet(tgt[perm], plabels), 2.0)
    np.testing.assert_allclose(a.qdot, b.qdot, atol=1e-12)


def _trajectory(n_samples=5):
    ts = np.linspace(0, 1, n_samples)
    pts = np.array([np.arange(8.0).reshape(4, 2) + 10 * t for t in ts])
    return PlannedImageTrajectory(ts, pts, ("p0", "p1", "p2", "p3"), "camera-frame")


def test_tracker():
    traj = _trajectory()
    desired = traj.features(len(traj) - 1)
    classical = TrackerState(desired, mode="classical-goal")
    assert track_trajectory(classical, traj.features(0)) is desired
    assert classical.finished
    state = TrackerState(desired, traj)
    target = track_trajectory(state, traj.features(0), advance_tol=2.0)
    assert state.cursor == 1
    np.testing.assert_array_equal(target.points, traj.points[1])
    far = FeatureSet(traj.points[0] + 100.0, traj.labels)
    track_trajectory(state, far)
    assert state.cursor == 1
    for i in range(1, len(traj)):
        track_trajectory(state, traj.features(i))
    assert state.finished and state.cursor == state.last
    track_trajectory(state, traj.features(len(traj) - 1))
    assert state.cursor == state.last
    with pytest.raises(ValueError):
        TrackerState(desired)


def test_classical_local_stability_with_true_jacobian():
    world = quiet_world()
    desired = world.observe().features
    world.move_to_offset(case_offset((30, -40, 20), (3, -2, 4)))
    norms = []
    for _ in range(300):
        j = JacobianEstimate(numeric_jacobian(world))
        y = world.observe().features
        norms.append(np.linalg.norm(desired.vector - y.vector))
        world.step(control_step(j, y, desired, 3.0).qdot, 0.02)
    assert np.all(np.diff(norms) < 0)
    assert norms[-1] < 1e-3 * norms[0]
