"""Planar ankle/knee leg testbed: closed-form rigid-body dynamics, hip
Jacobians, moment-arm linkage mapping, operational-space control, and
coupled simulation with either ideal torque sources or the full actuator
force loops in series.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import BSpline

from . import simkit
from .vlca import (ActuatorParams, ControllerGains, ControllerKind,
                   DEFAULT_MOMENT_ARM, VLCA_ACTUATOR)


class WorkspaceViolation(Exception):
    """Requested hip path leaves the reachable annulus."""


class OutOfRange(Exception):
    """Joint angle outside the linkage profile's tabulated range."""


# slender-rod link defaults: 0.4 m, 2 kg, centroid mid-link
_LINK_I = 2.0 * 0.4 ** 2 / 12.0


@dataclass(frozen=True)
class TwoDofParams:
    l1: float = 0.4        # ankle-to-knee length [m]
    l2: float = 0.4        # knee-to-hip length [m]
    m1: float = 2.0        # shank mass [kg]
    m2: float = 2.0        # thigh mass [kg]
    c1: float = 0.2        # shank centroid offset [m]
    c2: float = 0.2        # thigh centroid offset [m]
    i1: float = _LINK_I    # shank inertia about its centroid [kg*m^2]
    i2: float = _LINK_I    # thigh inertia about its centroid [kg*m^2]
    payload_mass: float = 10.0  # point mass carried at the hip [kg]
    gravity: float = 9.81  # [m/s^2]

    def __post_init__(self):
        if min(self.l1, self.l2, self.m1, self.m2) <= 0.0:
            raise ValueError("lengths and masses must be > 0")
        if not (0.0 <= self.c1 <= self.l1 and 0.0 <= self.c2 <= self.l2):
            raise ValueError("centroids must lie on their links")
        if self.i1 < 0.0 or self.i2 < 0.0 or self.payload_mass < 0.0:
            raise ValueError("inertias and payload must be >= 0")
        if self.gravity < 0.0:
            raise ValueError("gravity must be >= 0")

    @property
    def reach(self) -> float:
        return self.l1 + self.l2

    @property
    def inner_radius(self) -> float:
        return abs(self.l1 - self.l2)


def _dyn_scalars(q0, q1, w0, w1, p: TwoDofParams):
    """Mass-matrix entries, velocity-product vector, gravity vector."""
    c1_, s1_ = math.cos(q1), math.sin(q1)
    mp = p.payload_mass
    a11 = (p.i1 + p.i2 + p.m1 * p.c1 ** 2
           + p.m2 * (p.l1 ** 2 + p.c2 ** 2 + 2.0 * p.l1 * p.c2 * c1_)
           + mp * (p.l1 ** 2 + p.l2 ** 2 + 2.0 * p.l1 * p.l2 * c1_))
    a12 = (p.i2 + p.m2 * (p.c2 ** 2 + p.l1 * p.c2 * c1_)
           + mp * (p.l2 ** 2 + p.l1 * p.l2 * c1_))
    a22 = p.i2 + p.m2 * p.c2 ** 2 + mp * p.l2 ** 2
    h = (p.m2 * p.l1 * p.c2 + mp * p.l1 * p.l2) * s1_
    b1 = -h * (2.0 * w0 * w1 + w1 * w1)
    b2 = h * w0 * w0
    c0_ = math.cos(q0)
    c01 = math.cos(q0 + q1)
    g1 = ((p.m1 * p.c1 + (p.m2 + mp) * p.l1) * c0_
          + (p.m2 * p.c2 + mp * p.l2) * c01) * p.gravity
    g2 = (p.m2 * p.c2 + mp * p.l2) * c01 * p.gravity
    return a11, a12, a22, b1, b2, g1, g2


@dataclass(frozen=True)
class DynamicsTerms:
    mass_matrix: np.ndarray       # 2x2, symmetric positive definite
    velocity_product: np.ndarray  # length 2
    gravity: np.ndarray           # length 2


def dynamics_terms(q: Sequence[float], qdot: Sequence[float],
                   params: TwoDofParams) -> DynamicsTerms:
    a11, a12, a22, b1, b2, g1, g2 = _dyn_scalars(q[0], q[1], qdot[0], qdot[1],
                                                 params)
    return DynamicsTerms(mass_matrix=np.array([[a11, a12], [a12, a22]]),
                         velocity_product=np.array([b1, b2]),
                         gravity=np.array([g1, g2]))


def total_energy(q, qdot, params: TwoDofParams) -> float:
    """Kinetic plus gravitational potential energy [J]."""
    a11, a12, a22, _, _, _, _ = _dyn_scalars(q[0], q[1], qdot[0], qdot[1],
                                             params)
    w0, w1 = qdot[0], qdot[1]
    ke = 0.5 * (a11 * w0 * w0 + 2.0 * a12 * w0 * w1 + a22 * w1 * w1)
    s0, s01 = math.sin(q[0]), math.sin(q[0] + q[1])
    y1 = params.c1 * s0
    y2 = params.l1 * s0 + params.c2 * s01
    yp = params.l1 * s0 + params.l2 * s01
    pe = params.gravity * (params.m1 * y1 + params.m2 * y2
                           + params.payload_mass * yp)
    return ke + pe


def hip_position(q: Sequence[float], params: TwoDofParams) -> np.ndarray:
    x = params.l1 * math.cos(q[0]) + params.l2 * math.cos(q[0] + q[1])
    y = params.l1 * math.sin(q[0]) + params.l2 * math.sin(q[0] + q[1])
    return np.array([x, y])


@dataclass(frozen=True)
class JacobianInfo:
    j: np.ndarray       # 2x2 hip Jacobian
    jdot: np.ndarray    # its time derivative at the given joint rates
    det: float
    singular: bool      # |det| under 1e-6 * reach^2


def hip_jacobian(q: Sequence[float], params: TwoDofParams,
                 qdot: Sequence[float] = (0.0, 0.0)) -> JacobianInfo:
    l1, l2 = params.l1, params.l2
    s0, c0 = math.sin(q[0]), math.cos(q[0])
    s01, c01 = math.sin(q[0] + q[1]), math.cos(q[0] + q[1])
    j = np.array([[-l1 * s0 - l2 * s01, -l2 * s01],
                  [l1 * c0 + l2 * c01, l2 * c01]])
    wsum = qdot[0] + qdot[1]
    jdot = np.array([[-l1 * c0 * qdot[0] - l2 * c01 * wsum, -l2 * c01 * wsum],
                     [-l1 * s0 * qdot[0] - l2 * s01 * wsum, -l2 * s01 * wsum]])
    det = l1 * l2 * math.sin(q[1])
    return JacobianInfo(j=j, jdot=jdot, det=det,
                        singular=abs(det) < 1e-6 * params.reach ** 2)


def inverse_kinematics(x: Sequence[float], params: TwoDofParams,
                       knee: str = "down") -> np.ndarray:
    """Closed-form joint angles reaching hip position x; knee picks the
    elbow branch ('down' bends q1 negative)."""
    if knee not in ("down", "up"):
        raise ValueError("knee must be 'down' or 'up'")
    px, py = float(x[0]), float(x[1])
    rho2 = px * px + py * py
    l1, l2 = params.l1, params.l2
    cos_q1 = (rho2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    if not -1.0 <= cos_q1 <= 1.0:
        raise WorkspaceViolation(f"point ({px:.3g}, {py:.3g}) is unreachable")
    q1 = math.acos(cos_q1)
    if knee == "down":
        q1 = -q1
    q0 = math.atan2(py, px) - math.atan2(l2 * math.sin(q1),
                                         l1 + l2 * math.cos(q1))
    return np.array([q0, q1])


# ------------------------------------------------------------- linkage

@dataclass(frozen=True)
class LinkageProfile:
    """Moment arm of the screw axis about a joint, tabulated over angle.

    Linear interpolation between knots; querying outside the tabulated
    range raises OutOfRange. Adjacent arms may differ by at most 20%.
    """

    angles_rad: tuple
    arms_m: tuple

    def __post_init__(self):
        if len(self.angles_rad) != len(self.arms_m) or len(self.angles_rad) < 2:
            raise ValueError("need matching angle/arm tables of length >= 2")
        if any(b <= a for a, b in zip(self.angles_rad, self.angles_rad[1:])):
            raise ValueError("angles must strictly increase")
        if any(r <= 0.0 for r in self.arms_m):
            raise ValueError("moment arms must be > 0")
        for a, b in zip(self.arms_m, self.arms_m[1:]):
            if abs(b - a) / a > 0.20:
                raise ValueError("adjacent moment arms differ by more than 20%")

    @classmethod
    def constant(cls, arm_m: float, q_min: float = -2.0 * math.pi,
                 q_max: float = 2.0 * math.pi) -> "LinkageProfile":
        return cls((q_min, q_max), (arm_m, arm_m))

    def arm(self, q: float) -> float:
        if not self.angles_rad[0] <= q <= self.angles_rad[-1]:
            raise OutOfRange(f"angle {q:.4g} rad outside profile range "
                             f"[{self.angles_rad[0]:.4g}, {self.angles_rad[-1]:.4g}]")
        i = bisect_right(self.angles_rad, q)
        if i >= len(self.angles_rad):
            return self.arms_m[-1]
        if i == 0:
            return self.arms_m[0]
        a0, a1 = self.angles_rad[i - 1], self.angles_rad[i]
        r0, r1 = self.arms_m[i - 1], self.arms_m[i]
        return r0 + (r1 - r0) * (q - a0) / (a1 - a0)


def crouch_biased_profile() -> LinkageProfile:
    """Nonconstant example profile: the linkage gains leverage as the
    joint flexes."""
    return LinkageProfile(
        angles_rad=(-2.6, -1.3, 0.0, 1.3, 2.6),
        arms_m=(0.0540, 0.0500, 0.0458, 0.0500, 0.0540),
    )


@dataclass(frozen=True)
class LinkageMap:
    """Screw-to-joint transmission at one joint angle."""

    moment_arm: float  # [m]

    def force_to_torque(self, screw_force_n: float) -> float:
        return self.moment_arm * screw_force_n

    def joint_to_screw_speed(self, joint_rate: float) -> float:
        return self.moment_arm * joint_rate


def linkage_map(q: float, joint_index: int = 0,
                profile: Optional[LinkageProfile] = None) -> LinkageMap:
    """Moment-arm map for one joint's screw at the given angle. Both
    joints of the bench share the profile geometry."""
    if joint_index not in (0, 1):
        raise ValueError("joint_index must be 0 or 1")
    if profile is None:
        profile = LinkageProfile.constant(DEFAULT_MOMENT_ARM)
    return LinkageMap(moment_arm=profile.arm(q))


# ------------------------------------------------------------- control

@dataclass(frozen=True)
class TaskGains:
    kp: tuple = (625.0, 625.0)  # [1/s^2]
    kd: tuple = (40.0, 40.0)    # [1/s]

    def __post_init__(self):
        if len(self.kp) != 2 or len(self.kd) != 2:
            raise ValueError("kp and kd must have two entries")
        if min(self.kp) < 0.0 or min(self.kd) < 0.0:
            raise ValueError("gains must be >= 0")


@dataclass(frozen=True)
class OscCommand:
    tau: np.ndarray
    singularity_damped: bool


def _osc_tau(q0, q1, w0, w1, xd, yd, vxd, vyd, axd, ayd, gains: TaskGains,
             p: TwoDofParams):
    """Scalar core of the operational-space torque law."""
    l1, l2 = p.l1, p.l2
    s0, c0 = math.sin(q0), math.cos(q0)
    s01, c01 = math.sin(q0 + q1), math.cos(q0 + q1)
    px = l1 * c0 + l2 * c01
    py = l1 * s0 + l2 * s01
    j00 = -l1 * s0 - l2 * s01
    j01 = -l2 * s01
    j10 = l1 * c0 + l2 * c01
    j11 = l2 * c01
    wsum = w0 + w1
    jd00 = -l1 * c0 * w0 - l2 * c01 * wsum
    jd01 = -l2 * c01 * wsum
    jd10 = -l1 * s0 * w0 - l2 * s01 * wsum
    jd11 = -l2 * s01 * wsum

    ax = axd + gains.kp[0] * (xd - px) + gains.kd[0] * (vxd - (j00 * w0 + j01 * w1))
    ay = ayd + gains.kp[1] * (yd - py) + gains.kd[1] * (vyd - (j10 * w0 + j11 * w1))
    rx = ax - (jd00 * w0 + jd01 * w1)
    ry = ay - (jd10 * w0 + jd11 * w1)

    det = j00 * j11 - j01 * j10
    damp_at = 1e-3 * p.reach ** 2
    damped = abs(det) < damp_at
    if not damped:
        inv = 1.0 / det
        qdd0 = inv * (j11 * rx - j01 * ry)
        qdd1 = inv * (-j10 * rx + j00 * ry)
    else:
        # damped least-squares through J^T (J J^T + lam^2 I)^-1
        fro = math.sqrt(j00 * j00 + j01 * j01 + j10 * j10 + j11 * j11)
        lam = 0.01 * fro * (1.0 - abs(det) / damp_at)
        m00 = j00 * j00 + j01 * j01 + lam * lam
        m01 = j00 * j10 + j01 * j11
        m11 = j10 * j10 + j11 * j11 + lam * lam
        mdet = m00 * m11 - m01 * m01
        ux = (m11 * rx - m01 * ry) / mdet
        uy = (-m01 * rx + m00 * ry) / mdet
        qdd0 = j00 * ux + j10 * uy
        qdd1 = j01 * ux + j11 * uy

    a11, a12, a22, b1, b2, g1, g2 = _dyn_scalars(q0, q1, w0, w1, p)
    tau0 = a11 * qdd0 + a12 * qdd1 + b1 + g1
    tau1 = a12 * qdd0 + a22 * qdd1 + b2 + g2
    return tau0, tau1, damped


def osc_torque(q, qdot, x_des, xd_des, xdd_des, gains: TaskGains,
               params: TwoDofParams) -> OscCommand:
    """Task-space computed torque with damped inversion near singularity."""
    t0, t1, damped = _osc_tau(q[0], q[1], qdot[0], qdot[1],
                              x_des[0], x_des[1], xd_des[0], xd_des[1],
                              xdd_des[0], xdd_des[1], gains, params)
    return OscCommand(tau=np.array([t0, t1]), singularity_damped=damped)


# -------------------------------------------------------- trajectories

@dataclass(frozen=True)
class SineTrajectory:
    center: tuple          # (x, y) [m]
    amplitude: tuple       # (x, y) [m]
    freq_hz: float
    phase_rad: float = 0.0
    ramp_s: float = 0.0    # linear amplitude ramp-in from zero

    def __post_init__(self):
        if self.freq_hz <= 0.0:
            raise ValueError("freq_hz must be > 0")
        if self.ramp_s < 0.0:
            raise ValueError("ramp_s must be >= 0")

    def sample(self, t: np.ndarray):
        t = np.asarray(t, dtype=float)
        w = 2.0 * math.pi * self.freq_hz
        s = np.sin(w * t + self.phase_rad)
        c = np.cos(w * t + self.phase_rad)
        if self.ramp_s > 0.0:
            env = np.clip(t / self.ramp_s, 0.0, 1.0)
            denv = np.where(t < self.ramp_s, 1.0 / self.ramp_s, 0.0)
        else:
            env = np.ones_like(t)
            denv = np.zeros_like(t)
        pos = np.empty((len(t), 2))
        vel = np.empty((len(t), 2))
        acc = np.empty((len(t), 2))
        for k in range(2):
            a = self.amplitude[k]
            pos[:, k] = self.center[k] + a * env * s
            vel[:, k] = a * (denv * s + env * w * c)
            acc[:, k] = a * (2.0 * denv * w * c - env * w * w * s)
        return pos, vel, acc


class BSplineTrajectory:
    """Clamped quadratic B-spline through planar control points over a
    fixed duration; holds the final point afterwards.

    Repeating the first and last control points gives rest-to-rest motion.
    """

    def __init__(self, control_points: Sequence[Sequence[float]],
                 duration_s: float):
        pts = np.asarray(control_points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise ValueError("need at least 3 planar control points")
        if duration_s <= 0.0:
            raise ValueError("duration_s must be > 0")
        self.control_points = pts
        self.duration_s = float(duration_s)
        n = pts.shape[0]
        k = 2
        inner = np.linspace(0.0, duration_s, n - k + 1)
        knots = np.concatenate([[0.0] * k, inner, [duration_s] * k])
        self._spl = BSpline(knots, pts, k, extrapolate=False)
        self._dspl = self._spl.derivative(1)
        self._ddspl = self._spl.derivative(2)

    @classmethod
    def vertical_lift(cls, start_xy: Sequence[float], height: float,
                      duration_s: float) -> "BSplineTrajectory":
        x0, y0 = float(start_xy[0]), float(start_xy[1])
        pts = [(x0, y0), (x0, y0), (x0, y0 + 0.5 * height),
               (x0, y0 + height), (x0, y0 + height)]
        return cls(pts, duration_s)

    def sample(self, t: np.ndarray):
        t = np.asarray(t, dtype=float)
        tc = np.clip(t, 0.0, self.duration_s)
        pos = self._spl(tc)
        vel = self._dspl(tc)
        acc = self._ddspl(tc)
        held = t > self.duration_s
        if held.any():
            vel[held] = 0.0
            acc[held] = 0.0
        return pos, vel, acc


# ------------------------------------------------------------ sim loop

TESTBED_CSV_HEADER = ("t_s,x_m,y_m,x_des_m,y_des_m,q0_rad,q1_rad,"
                      "tau_cmd_0_nm,tau_cmd_1_nm,tau_app_0_nm,tau_app_1_nm,"
                      "i_0_a,i_1_a,f_k_0_n,f_k_1_n")


@dataclass
class TestbedTrace:
    dt: float
    t: np.ndarray
    x: np.ndarray              # hip position (n, 2)
    x_des: np.ndarray          # commanded hip position (n, 2)
    q: np.ndarray              # joint angles (n, 2)
    qdot: np.ndarray           # joint rates (n, 2)
    tau_cmd: np.ndarray        # controller torque request (n, 2)
    tau_applied: np.ndarray    # torque delivered at the joints (n, 2)
    i_m: np.ndarray            # motor currents (n, 2); nan in ideal mode
    f_k: np.ndarray            # spring forces (n, 2); nan in ideal mode
    motor_speed_rad_s: np.ndarray  # motor speeds (n, 2); nan in ideal mode
    saturation_count: int = 0
    singular_count: int = 0
    meta: dict = field(default_factory=dict)

    def max_tracking_error(self) -> float:
        return float(np.max(np.linalg.norm(self.x - self.x_des, axis=1)))

    def to_csv(self) -> str:
        lines = [TESTBED_CSV_HEADER]
        for k in range(len(self.t)):
            cells = [self.t[k], self.x[k, 0], self.x[k, 1], self.x_des[k, 0],
                     self.x_des[k, 1], self.q[k, 0], self.q[k, 1],
                     self.tau_cmd[k, 0], self.tau_cmd[k, 1],
                     self.tau_applied[k, 0], self.tau_applied[k, 1],
                     self.i_m[k, 0], self.i_m[k, 1],
                     self.f_k[k, 0], self.f_k[k, 1]]
            lines.append(",".join("" if math.isnan(float(c)) else f"{float(c):.10g}"
                                  for c in cells))
        return "\n".join(lines) + "\n"


def _check_workspace(pos: np.ndarray, params: TwoDofParams,
                     margin: float = 0.02):
    r = np.linalg.norm(pos, axis=1)
    if float(r.max()) > params.reach - margin:
        raise WorkspaceViolation(
            f"path reaches radius {r.max():.3f} m; limit "
            f"{params.reach - margin:.3f} m")
    if float(r.min()) < params.inner_radius + margin:
        raise WorkspaceViolation(
            f"path reaches radius {r.min():.3f} m; inner limit "
            f"{params.inner_radius + margin:.3f} m")


def simulate_passive(q_init, qdot_init, duration: float,
                     params: TwoDofParams, substep_dt: float = 1e-4):
    """Unactuated swing, RK4; returns (t, q, qdot) at the substep rate."""
    n = int(round(duration / substep_dt))
    q0, q1 = float(q_init[0]), float(q_init[1])
    w0, w1 = float(qdot_init[0]), float(qdot_init[1])
    out_t = np.empty(n + 1)
    out_q = np.empty((n + 1, 2))
    out_w = np.empty((n + 1, 2))

    def deriv(a, b, wa, wb):
        a11, a12, a22, b1, b2, g1, g2 = _dyn_scalars(a, b, wa, wb, params)
        det = a11 * a22 - a12 * a12
        r0 = -b1 - g1
        r1 = -b2 - g2
        return wa, wb, (a22 * r0 - a12 * r1) / det, (a11 * r1 - a12 * r0) / det

    h = substep_dt
    for k in range(n + 1):
        out_t[k] = k * h
        out_q[k] = (q0, q1)
        out_w[k] = (w0, w1)
        if k == n:
            break
        d1 = deriv(q0, q1, w0, w1)
        d2 = deriv(q0 + 0.5 * h * d1[0], q1 + 0.5 * h * d1[1],
                   w0 + 0.5 * h * d1[2], w1 + 0.5 * h * d1[3])
        d3 = deriv(q0 + 0.5 * h * d2[0], q1 + 0.5 * h * d2[1],
                   w0 + 0.5 * h * d2[2], w1 + 0.5 * h * d2[3])
        d4 = deriv(q0 + h * d3[0], q1 + h * d3[1],
                   w0 + h * d3[2], w1 + h * d3[3])
        q0 += h / 6.0 * (d1[0] + 2.0 * d2[0] + 2.0 * d3[0] + d4[0])
        q1 += h / 6.0 * (d1[1] + 2.0 * d2[1] + 2.0 * d3[1] + d4[1])
        w0 += h / 6.0 * (d1[2] + 2.0 * d2[2] + 2.0 * d3[2] + d4[2])
        w1 += h / 6.0 * (d1[3] + 2.0 * d2[3] + 2.0 * d3[3] + d4[3])
    return out_t, out_q, out_w


DEFAULT_FORCE_GAINS = ControllerGains(q_taud_cutoff=2.0 * math.pi * 60.0)


def simulate_osc(trajectory, payload_kg: float, mode: str, duration: float,
                 task_gains: TaskGains = TaskGains(),
                 params: TwoDofParams = TwoDofParams(),
                 actuator: ActuatorParams = VLCA_ACTUATOR,
                 force_gains: ControllerGains = DEFAULT_FORCE_GAINS,
                 force_kind: ControllerKind = ControllerKind.PDM_DOB,
                 profile: Optional[LinkageProfile] = None,
                 external_force: Optional[Callable[[float], Sequence[float]]] = None,
                 knee: str = "down",
                 q_init: Optional[Sequence[float]] = None) -> TestbedTrace:
    """Track a hip trajectory under operational-space control.

    mode 'ideal_torque' applies the commanded torques directly;
    'cascaded_vlca' closes a force loop per joint through the series
    actuator, including current saturation and command delay. The leg
    starts at rest on the trajectory's initial point (or at q_init when
    given) with the spring preloaded against gravity.
    """
    if mode not in ("ideal_torque", "cascaded_vlca"):
        raise ValueError("mode must be 'ideal_torque' or 'cascaded_vlca'")
    if duration <= 0.0:
        raise ValueError("duration must be > 0")
    params = replace(params, payload_mass=float(payload_kg))
    if profile is None:
        profile = LinkageProfile.constant(DEFAULT_MOMENT_ARM)

    dt = simkit.CONTROL_DT
    substeps = simkit.PLANT_SUBSTEPS
    h = dt / substeps
    n = int(round(duration / dt))
    times = np.arange(n) * dt
    pos_des, vel_des, acc_des = trajectory.sample(times)
    _check_workspace(pos_des, params)

    if q_init is None:
        q = inverse_kinematics(pos_des[0], params, knee)
        q0, q1 = float(q[0]), float(q[1])
    else:
        q0, q1 = float(q_init[0]), float(q_init[1])
    w0 = w1 = 0.0
    cascaded = mode == "cascaded_vlca"

    k_r, b_r = actuator.k_r, actuator.b_r
    m_m = actuator.j_m * actuator.n_m ** 2 + actuator.m_r
    b_dt = actuator.b_m * actuator.n_m ** 2
    n_drive = actuator.drive_constant

    ctrls = None
    xm = [0.0, 0.0]
    vm = [0.0, 0.0]
    ll = [0.0, 0.0]
    if cascaded:
        ctrls = [simkit.DiscreteForceController(force_kind, actuator,
                                                force_gains, dt)
                 for _ in range(2)]
        # preload the springs against gravity so the leg starts settled
        _, _, _, _, _, g1, g2 = _dyn_scalars(q0, q1, 0.0, 0.0, params)
        for j, gj, qj in ((0, g1, q0), (1, g2, q1)):
            xm[j] = (gj / profile.arm(qj)) / k_r

    trace = TestbedTrace(dt=dt, t=times, x=np.empty((n, 2)), x_des=pos_des,
                         q=np.empty((n, 2)), qdot=np.empty((n, 2)),
                         tau_cmd=np.empty((n, 2)), tau_applied=np.empty((n, 2)),
                         i_m=np.full((n, 2), math.nan),
                         f_k=np.full((n, 2), math.nan),
                         motor_speed_rad_s=np.full((n, 2), math.nan),
                         meta={"mode": mode, "payload_kg": payload_kg})
    singular = 0

    def ext_tau(t, q0_, q1_):
        if external_force is None:
            return 0.0, 0.0
        fx, fy = external_force(t)
        l1, l2 = params.l1, params.l2
        s0, c0 = math.sin(q0_), math.cos(q0_)
        s01, c01 = math.sin(q0_ + q1_), math.cos(q0_ + q1_)
        t0 = (-l1 * s0 - l2 * s01) * fx + (l1 * c0 + l2 * c01) * fy
        t1 = -l2 * s01 * fx + l2 * c01 * fy
        return t0, t1

    def deriv(state, tau_fixed, i_fixed, t):
        if cascaded:
            a, b, wa, wb, x0, v0, l0, x1, v1, l1_ = state
        else:
            a, b, wa, wb = state
        te0, te1 = ext_tau(t, a, b)
        if cascaded:
            r0, r1 = profile.arm(a), profile.arm(b)
            ld0, ld1 = r0 * wa, r1 * wb
            f0 = k_r * (x0 - l0) + b_r * (v0 - ld0)
            f1 = k_r * (x1 - l1_) + b_r * (v1 - ld1)
            t0, t1 = r0 * f0, r1 * f1
        else:
            t0, t1 = tau_fixed
        a11, a12, a22, b1, b2, g1, g2 = _dyn_scalars(a, b, wa, wb, params)
        det = a11 * a22 - a12 * a12
        r_0 = t0 - b1 - g1 + te0
        r_1 = t1 - b2 - g2 + te1
        wd0 = (a22 * r_0 - a12 * r_1) / det
        wd1 = (a11 * r_1 - a12 * r_0) / det
        if cascaded:
            vd0 = (n_drive * i_fixed[0] - b_dt * v0 - f0) / m_m
            vd1 = (n_drive * i_fixed[1] - b_dt * v1 - f1) / m_m
            return (wa, wb, wd0, wd1, v0, vd0, ld0, v1, vd1, ld1)
        return (wa, wb, wd0, wd1)

    for k in range(n):
        t = float(times[k])
        tau0, tau1, damped = _osc_tau(q0, q1, w0, w1,
                                      pos_des[k, 0], pos_des[k, 1],
                                      vel_des[k, 0], vel_des[k, 1],
                                      acc_des[k, 0], acc_des[k, 1],
                                      task_gains, params)
        if damped:
            singular += 1
        i_now = (0.0, 0.0)
        if cascaded:
            r0, r1 = profile.arm(q0), profile.arm(q1)
            f_meas0, f_meas1 = k_r * (xm[0] - ll[0]), k_r * (xm[1] - ll[1])
            i_now = (ctrls[0].step(tau0 / r0, f_meas0, vm[0]),
                     ctrls[1].step(tau1 / r1, f_meas1, vm[1]))
            ld0, ld1 = r0 * w0, r1 * w1
            f0 = k_r * (xm[0] - ll[0]) + b_r * (vm[0] - ld0)
            f1 = k_r * (xm[1] - ll[1]) + b_r * (vm[1] - ld1)
            trace.tau_applied[k] = (r0 * f0, r1 * f1)
            trace.i_m[k] = i_now
            trace.f_k[k] = (f_meas0, f_meas1)
            trace.motor_speed_rad_s[k] = (actuator.n_m * vm[0],
                                          actuator.n_m * vm[1])
        else:
            trace.tau_applied[k] = (tau0, tau1)
        trace.tau_cmd[k] = (tau0, tau1)
        trace.q[k] = (q0, q1)
        trace.qdot[k] = (w0, w1)
        trace.x[k] = hip_position((q0, q1), params)

        if cascaded:
            state = (q0, q1, w0, w1, xm[0], vm[0], ll[0], xm[1], vm[1], ll[1])
        else:
            state = (q0, q1, w0, w1)
        tau_fixed = (tau0, tau1)
        for _ in range(substeps):
            d1 = deriv(state, tau_fixed, i_now, t)
            s2 = tuple(s + 0.5 * h * d for s, d in zip(state, d1))
            d2 = deriv(s2, tau_fixed, i_now, t)
            s3 = tuple(s + 0.5 * h * d for s, d in zip(state, d2))
            d3 = deriv(s3, tau_fixed, i_now, t)
            s4 = tuple(s + h * d for s, d in zip(state, d3))
            d4 = deriv(s4, tau_fixed, i_now, t)
            state = tuple(s + h / 6.0 * (a + 2.0 * b + 2.0 * c + d)
                          for s, a, b, c, d in zip(state, d1, d2, d3, d4))
        if not all(math.isfinite(s) for s in state):
            raise simkit.NonFiniteState(f"leg simulation diverged at t={t:.3f} s")
        if cascaded:
            q0, q1, w0, w1, xm[0], vm[0], ll[0], xm[1], vm[1], ll[1] = state
        else:
            q0, q1, w0, w1 = state

    trace.singular_count = singular
    if cascaded:
        trace.saturation_count = sum(c.saturation_count for c in ctrls)
        if trace.saturation_count:
            trace.meta["saturated"] = True
    return trace
