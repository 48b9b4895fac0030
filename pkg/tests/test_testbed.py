"""Two-link leg dynamics, linkage kinematics, and task-space control."""
import math
from dataclasses import replace

import numpy as np
import pytest

from vlcasim import testbed as tb

P = tb.TwoDofParams()


# ----------------------------------------------------------------- dynamics

def test_param_validation_and_reach():
    with pytest.raises(ValueError):
        tb.TwoDofParams(l1=0.0)
    with pytest.raises(ValueError):
        tb.TwoDofParams(c1=0.5)  # centroid past the link end
    with pytest.raises(ValueError):
        tb.TwoDofParams(payload_mass=-1.0)
    assert P.reach == pytest.approx(0.8)
    assert P.inner_radius == 0.0


def test_mass_matrix_symmetric_positive_definite():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        params = tb.TwoDofParams(payload_mass=float(rng.uniform(0.0, 30.0)))
        q = rng.uniform(-2.6, 2.6, 2)
        a = tb.dynamics_terms(q, (0.0, 0.0), params).mass_matrix
        assert a[0, 1] == a[1, 0]
        eig = np.linalg.eigvalsh(a)
        assert eig[0] > 0.0


def test_mass_matrix_matches_kinetic_energy_curvature():
    # central differences of the kinetic energy in joint rates reproduce
    # every entry of the mass matrix
    rng = np.random.default_rng(4)
    h = 1e-3
    for _ in range(20):
        q = rng.uniform(-1.2, 1.2, 2)
        a = tb.dynamics_terms(q, (0.0, 0.0), P).mass_matrix
        pe = tb.total_energy(q, (0.0, 0.0), P)

        def ke(w):
            return tb.total_energy(q, w, P) - pe

        for i in range(2):
            for j in range(2):
                wpp, wpm = np.zeros(2), np.zeros(2)
                wmp, wmm = np.zeros(2), np.zeros(2)
                wpp[i] += h; wpp[j] += h
                wpm[i] += h; wpm[j] -= h
                wmp[i] -= h; wmp[j] += h
                wmm[i] -= h; wmm[j] -= h
                fd = (ke(wpp) - ke(wpm) - ke(wmp) + ke(wmm)) / (4.0 * h * h)
                assert fd == pytest.approx(a[i, j], rel=1e-6)


def test_gravity_vector_matches_static_moments():
    # both links horizontal: each joint carries the weight moments of
    # everything distal to it
    d = tb.dynamics_terms((0.0, 0.0), (0.0, 0.0), P)
    g1 = P.gravity * (P.m1 * P.c1 + P.m2 * (P.l1 + P.c2)
                      + P.payload_mass * (P.l1 + P.l2))
    g2 = P.gravity * (P.m2 * P.c2 + P.payload_mass * P.l2)
    assert d.gravity[0] == pytest.approx(g1, rel=1e-12)
    assert d.gravity[1] == pytest.approx(g2, rel=1e-12)
    # straight up: no gravity torque at all
    up = tb.dynamics_terms((math.pi / 2.0, 0.0), (0.0, 0.0), P)
    assert np.max(np.abs(up.gravity)) < 1e-12


def test_velocity_product_vanishes_at_rest_and_is_power_neutral():
    rng = np.random.default_rng(9)
    d0 = tb.dynamics_terms((0.7, -0.4), (0.0, 0.0), P)
    assert np.all(d0.velocity_product == 0.0)
    # the velocity-product force absorbs exactly the power released by the
    # configuration-dependent inertia
    h = 1e-6
    for _ in range(25):
        q = rng.uniform(-1.5, 1.5, 2)
        w = rng.uniform(-3.0, 3.0, 2)
        b = tb.dynamics_terms(q, w, P).velocity_product
        a_plus = tb.dynamics_terms(q + h * w, (0.0, 0.0), P).mass_matrix
        a_minus = tb.dynamics_terms(q - h * w, (0.0, 0.0), P).mass_matrix
        a_dot = (a_plus - a_minus) / (2.0 * h)
        lhs = float(w @ b)
        rhs = 0.5 * float(w @ a_dot @ w)
        assert lhs == pytest.approx(rhs, rel=1e-5, abs=1e-7)


def test_passive_swing_conserves_energy():
    zero_g = replace(P, gravity=0.0)
    t, q, qdot = tb.simulate_passive((0.4, -0.8), (1.0, -0.5), 1.0, zero_g)
    e = [tb.total_energy(qi, wi, zero_g) for qi, wi in zip(q, qdot)]
    assert abs(e[-1] - e[0]) <= 1e-6 * abs(e[0])
    assert t[-1] == pytest.approx(1.0)


# --------------------------------------------------------------- kinematics

def test_jacobian_columns_are_turn_levers():
    q = np.array([0.7, -1.1])
    info = tb.hip_jacobian(q, P)
    hip = tb.hip_position(q, P)
    knee = np.array([P.l1 * math.cos(q[0]), P.l1 * math.sin(q[0])])
    np.testing.assert_allclose(info.j[:, 0], [-hip[1], hip[0]], atol=1e-12)
    rel = hip - knee
    np.testing.assert_allclose(info.j[:, 1], [-rel[1], rel[0]], atol=1e-12)


def test_jacobian_rate_matches_finite_difference():
    q = np.array([0.7, -1.1])
    qd = np.array([0.3, -0.5])
    info = tb.hip_jacobian(q, P, qd)
    h = 1e-6
    fd = (tb.hip_jacobian(q + h * qd, P).j - info.j) / h
    np.testing.assert_allclose(info.jdot, fd, atol=1e-6)


def test_jacobian_flags_the_straight_leg():
    assert tb.hip_jacobian((0.3, 0.0), P).singular
    assert not tb.hip_jacobian((0.3, -0.9), P).singular


def test_inverse_kinematics_round_trip():
    rng = np.random.default_rng(13)
    for _ in range(50):
        r = rng.uniform(0.15, 0.75)
        th = rng.uniform(-1.2, 1.5)
        target = np.array([r * math.cos(th), r * math.sin(th)])
        q = tb.inverse_kinematics(target, P)
        np.testing.assert_allclose(tb.hip_position(q, P), target, atol=1e-9)
        assert q[1] <= 0.0  # knee-down branch
    with pytest.raises(tb.WorkspaceViolation):
        tb.inverse_kinematics((1.0, 0.5), P)
    with pytest.raises(ValueError):
        tb.inverse_kinematics((0.2, 0.4), P, knee="sideways")


# ------------------------------------------------------------------ linkage

def test_linkage_rated_point():
    lm = tb.linkage_map(0.0)
    assert lm.force_to_torque(5900.0) == 270.0
    assert 91.0 / lm.moment_arm == pytest.approx(1988.5, abs=1.0)


def test_linkage_is_power_preserving():
    rng = np.random.default_rng(21)
    prof = tb.crouch_biased_profile()
    lo, hi = prof.angles_rad[0], prof.angles_rad[-1]
    for _ in range(200):
        m = tb.linkage_map(float(rng.uniform(lo, hi)), 1, prof)
        f = float(rng.uniform(-5e3, 5e3))
        w = float(rng.uniform(-3.0, 3.0))
        assert m.force_to_torque(f) * w == pytest.approx(
            f * m.joint_to_screw_speed(w), rel=1e-12, abs=1e-9)


def test_linkage_profile_validation():
    with pytest.raises(ValueError):
        tb.LinkageProfile((0.0, 0.0, 1.0), (0.04, 0.04, 0.04))
    with pytest.raises(ValueError):
        tb.LinkageProfile((0.0, 1.0), (0.04, 0.06))  # 50 percent jump
    with pytest.raises(ValueError):
        tb.LinkageProfile((0.0,), (0.04,))
    prof = tb.crouch_biased_profile()
    with pytest.raises(tb.OutOfRange):
        prof.arm(prof.angles_rad[-1] + 0.5)
    with pytest.raises(ValueError):
        tb.linkage_map(0.0, joint_index=2)


# -------------------------------------------------------------- osc control

def test_rest_on_target_commands_gravity_support():
    q = np.array([1.2, -0.9])
    x_here = tb.hip_position(q, P)
    cmd = tb.osc_torque(q, (0.0, 0.0), x_here, (0.0, 0.0), (0.0, 0.0),
                        tb.TaskGains(), P)
    want = tb.dynamics_terms(q, (0.0, 0.0), P).gravity
    np.testing.assert_allclose(cmd.tau, want, atol=1e-9)
    assert not cmd.singularity_damped


def test_crouch_torques_stay_inside_the_joint_rating():
    p23 = tb.TwoDofParams(payload_mass=23.0)
    q = tb.inverse_kinematics((0.15, 0.45), p23)
    cmd = tb.osc_torque(q, (0.0, 0.0), tb.hip_position(q, p23),
                        (0.0, 0.0), (0.0, 0.0), tb.TaskGains(), p23)
    assert np.max(np.abs(cmd.tau)) < 270.0
    assert cmd.tau[1] == pytest.approx(89.60, abs=0.5)


def test_task_stiffness_acts_linearly_on_error():
    q = np.array([1.2, -0.9])
    x_des = tb.hip_position(q, P) + np.array([0.03, -0.02])

    def tau(kp):
        return tb.osc_torque(q, (0.0, 0.0), x_des, (0.0, 0.0), (0.0, 0.0),
                             tb.TaskGains(kp=(kp, kp)), P).tau

    base, one, two = tau(0.0), tau(400.0), tau(800.0)
    np.testing.assert_allclose(two - base, 2.0 * (one - base),
                               rtol=1e-12, atol=1e-12)


def test_task_gain_validation():
    with pytest.raises(ValueError):
        tb.TaskGains(kp=(100.0,))
    with pytest.raises(ValueError):
        tb.TaskGains(kd=(-1.0, 10.0))


# ------------------------------------------------------------- trajectories

def test_sine_trajectory_validation():
    with pytest.raises(ValueError):
        tb.SineTrajectory(center=(0.2, 0.5), amplitude=(0.0, 0.1), freq_hz=0.0)
    with pytest.raises(ValueError):
        tb.SineTrajectory(center=(0.2, 0.5), amplitude=(0.0, 0.1),
                          freq_hz=1.0, ramp_s=-1.0)


def test_bspline_lift_is_rest_to_rest():
    bs = tb.BSplineTrajectory.vertical_lift((0.2, 0.4), 0.2, 2.0)
    pos, vel, _ = bs.sample(np.array([0.0, 2.0, 2.5]))
    np.testing.assert_allclose(pos[0], [0.2, 0.4], atol=1e-9)
    np.testing.assert_allclose(pos[1], [0.2, 0.6], atol=1e-9)
    np.testing.assert_allclose(pos[2], [0.2, 0.6], atol=1e-9)  # holds the end
    np.testing.assert_allclose(vel[0], 0.0, atol=1e-9)
    np.testing.assert_allclose(vel[1], 0.0, atol=1e-9)
    np.testing.assert_allclose(vel[2], 0.0, atol=1e-9)
    with pytest.raises(ValueError):
        tb.BSplineTrajectory(((0.2, 0.4), (0.2, 0.5)), 2.0)
    with pytest.raises(ValueError):
        tb.BSplineTrajectory(((0.2, 0.4), (0.2, 0.5), (0.2, 0.6)), 0.0)


# --------------------------------------------------------------- simulation

def test_zero_amplitude_regulation_holds_position():
    traj = tb.SineTrajectory(center=(0.2, 0.55), amplitude=(0.0, 0.0),
                             freq_hz=1.0)
    tr = tb.simulate_osc(traj, 10.0, "ideal_torque", 2.0)
    assert tr.max_tracking_error() < 1e-4
    assert tr.saturation_count == 0


def test_error_dynamics_follow_the_commanded_gains():
    # released from a 1 cm offset under ideal torque, each axis follows
    # the second-order law set by (kp, kd) within 5 percent
    kp, kd = 625.0, 40.0
    center = np.array([0.2, 0.5])
    traj = tb.SineTrajectory(center=tuple(center), amplitude=(0.0, 0.0),
                             freq_hz=1.0)
    q0 = tb.inverse_kinematics(center + np.array([0.01, 0.0]), P)
    tr = tb.simulate_osc(traj, 0.0, "ideal_torque", 0.6,
                         task_gains=tb.TaskGains(kp=(kp, kp), kd=(kd, kd)),
                         q_init=q0)
    ex = tr.x[:, 0] - center[0]
    wn = math.sqrt(kp)
    z = kd / (2.0 * wn)
    wd = wn * math.sqrt(1.0 - z * z)
    t = tr.t
    ana = ex[0] * np.exp(-z * wn * t) * (np.cos(wd * t)
                                         + z * wn / wd * np.sin(wd * t))
    mask = t <= 0.3
    assert np.max(np.abs(ex[mask] - ana[mask])) < 0.05 * abs(ex[0])
    # the other axis stays decoupled
    assert np.max(np.abs(tr.x[mask, 1] - center[1])) < 1e-4


def test_anisotropic_stiffness_shapes_the_compliance():
    traj = tb.SineTrajectory(center=(0.2, 0.55), amplitude=(0.0, 0.0),
                             freq_hz=1.0)
    gains = tb.TaskGains(kp=(25.0, 625.0), kd=(10.0, 50.0))

    def deflection(axis):
        def push(t):
            f = 50.0 if t > 1.0 else 0.0
            return (f, 0.0) if axis == 0 else (0.0, f)

        tr = tb.simulate_osc(traj, 10.0, "ideal_torque", 4.0,
                             task_gains=gains, external_force=push)
        return float(np.max(np.abs((tr.x - tr.x_des)[:, axis])))

    soft = deflection(0)
    stiff = deflection(1)
    assert soft / stiff > 5.0


def test_trajectory_leaving_the_workspace_is_refused():
    traj = tb.SineTrajectory(center=(0.0, 0.75), amplitude=(0.0, 0.1),
                             freq_hz=1.0)
    with pytest.raises(tb.WorkspaceViolation, match="radius"):
        tb.simulate_osc(traj, 10.0, "ideal_torque", 1.0)


def test_simulate_osc_argument_guards():
    traj = tb.SineTrajectory(center=(0.2, 0.5), amplitude=(0.0, 0.05),
                             freq_hz=1.0)
    with pytest.raises(ValueError):
        tb.simulate_osc(traj, 10.0, "open_loop", 1.0)
    with pytest.raises(ValueError):
        tb.simulate_osc(traj, 10.0, "ideal_torque", 0.0)


def test_trace_csv_layout():
    traj = tb.SineTrajectory(center=(0.2, 0.5), amplitude=(0.0, 0.05),
                             freq_hz=1.0)
    tr = tb.simulate_osc(traj, 10.0, "ideal_torque", 0.2)
    lines = tr.to_csv().strip().splitlines()
    assert lines[0] == tb.TESTBED_CSV_HEADER
    assert len(lines) == len(tr.t) + 1
    assert len(lines[1].split(",")) == len(lines[0].split(","))
