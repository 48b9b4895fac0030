"""Two-node winding/housing thermal model with liquid-cooling switch,
target-driven calibration, continuous operating limits, and power-flow
accounting for lift experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .vlca import ActuatorParams, DEFAULT_MOMENT_ARM, VLCA_ACTUATOR


class CalibrationInfeasible(Exception):
    """No parameter set inside the search bounds meets the targets;
    carries the residuals of the best point found."""

    def __init__(self, message: str, residuals: Optional[dict] = None):
        super().__init__(message)
        self.residuals = dict(residuals or {})


class NoPositivePowerInterval(Exception):
    """Trace never delivers positive mechanical power at the joints."""


@dataclass(frozen=True)
class ThermalParams:
    c_winding: float       # winding lump heat capacity [J/K]
    c_housing: float       # housing lump heat capacity [J/K]
    r_wh: float            # winding-to-housing resistance [K/W]
    r_ha_on: float         # housing-to-ambient resistance, coolant on [K/W]
    r_ha_off: float        # housing-to-ambient resistance, coolant off [K/W]
    r_elec_25: float = 0.45   # electrical resistance at 25 C [ohm]
    alpha: float = 0.0039     # copper resistance temperature coeff [1/K]
    ambient_c: float = 25.0
    limit_c: float = 155.0    # winding insulation limit

    def __post_init__(self):
        if min(self.c_winding, self.c_housing, self.r_wh, self.r_ha_on,
               self.r_ha_off, self.r_elec_25) <= 0.0:
            raise ValueError("capacities and resistances must be positive")
        if self.r_ha_on > self.r_ha_off:
            raise ValueError("coolant flow cannot raise the housing-to-"
                             "ambient resistance (need r_ha_on <= r_ha_off)")
        if self.alpha < 0.0:
            raise ValueError("alpha must be >= 0")
        if self.limit_c < self.ambient_c:
            raise ValueError("limit_c must not be below ambient_c")

    def r_ha(self, cooling_on: bool) -> float:
        return self.r_ha_on if cooling_on else self.r_ha_off

    def resistance_at(self, t_winding_c: float) -> float:
        return self.r_elec_25 * (1.0 + self.alpha * (t_winding_c - 25.0))


@dataclass(frozen=True)
class ThermalState:
    t_winding: float  # [C]
    t_housing: float  # [C]


def winding_power(state: ThermalState, current_a: float,
                  params: ThermalParams) -> float:
    """Copper loss at the present winding temperature [W]."""
    return current_a ** 2 * params.resistance_at(state.t_winding)


def _propagator(params: ThermalParams, cooling_on: bool, dt: float):
    """Exact matrix exponential of the two-node network over dt."""
    a = 1.0 / (params.c_winding * params.r_wh)
    c = 1.0 / (params.c_housing * params.r_wh)
    d = 1.0 / (params.c_housing * params.r_ha(cooling_on))
    tr = -(a + c + d)
    det = a * d
    disc = math.sqrt(max(tr * tr - 4.0 * det, 0.0))
    l1 = 0.5 * (tr + disc)
    l2 = 0.5 * (tr - disc)
    a00, a01, a10, a11 = -a, a, c, -(c + d)
    if abs(l1 - l2) < 1e-12 * max(abs(l1), abs(l2), 1e-30):
        e = math.exp(l1 * dt)
        return (e * (1.0 + (a00 - l1) * dt), e * a01 * dt,
                e * a10 * dt, e * (1.0 + (a11 - l1) * dt))
    e1, e2 = math.exp(l1 * dt), math.exp(l2 * dt)
    inv = 1.0 / (l1 - l2)
    p00 = (e1 * (a00 - l2) - e2 * (a00 - l1)) * inv
    p01 = (e1 - e2) * a01 * inv
    p10 = (e1 - e2) * a10 * inv
    p11 = (e1 * (a11 - l2) - e2 * (a11 - l1)) * inv
    return p00, p01, p10, p11


def _steady_point(power_w: float, params: ThermalParams, cooling_on: bool):
    r_ha = params.r_ha(cooling_on)
    tw = params.ambient_c + power_w * (params.r_wh + r_ha)
    th = params.ambient_c + power_w * r_ha
    return tw, th


def step_thermal(state: ThermalState, current_a: float, cooling_on: bool,
                 dt: float, params: ThermalParams) -> ThermalState:
    """Advance one step with the copper loss frozen at the entry
    temperature; the two-node linear network itself is integrated
    exactly."""
    if not 0.0 < dt <= 0.010:
        raise ValueError("dt must be within (0, 10 ms]")
    p = winding_power(state, current_a, params)
    ssw, ssh = _steady_point(p, params, cooling_on)
    p00, p01, p10, p11 = _propagator(params, cooling_on, dt)
    dw = state.t_winding - ssw
    dh = state.t_housing - ssh
    return ThermalState(t_winding=ssw + p00 * dw + p01 * dh,
                        t_housing=ssh + p10 * dw + p11 * dh)


def steady_state_winding(current_a: float, params: ThermalParams,
                         cooling_on: bool = True) -> float:
    """Self-consistent settled winding temperature at a held current,
    accounting for resistance growth with temperature. Returns inf on
    thermal runaway."""
    s = params.r_wh + params.r_ha(cooling_on)
    k = current_a ** 2 * params.r_elec_25 * s
    denom = 1.0 - k * params.alpha
    if denom <= 0.0:
        return math.inf
    return (params.ambient_c + k * (1.0 - 25.0 * params.alpha)) / denom


@dataclass
class ThermalTrace:
    t: np.ndarray
    current_a: np.ndarray
    t_winding: np.ndarray
    t_housing: np.ndarray
    cooling_on: bool
    meta: dict = field(default_factory=dict)

    @property
    def peak_winding(self) -> float:
        return float(self.t_winding.max())


THERMAL_CSV_HEADER = "t_s,i_A,T_winding_C,T_housing_C,cooling"


def thermal_trace_to_csv(trace: ThermalTrace) -> str:
    flag = "1" if trace.cooling_on else "0"
    lines = [THERMAL_CSV_HEADER]
    for k in range(len(trace.t)):
        lines.append(f"{trace.t[k]:.10g},{trace.current_a[k]:.10g},"
                     f"{trace.t_winding[k]:.10g},{trace.t_housing[k]:.10g},"
                     f"{flag}")
    return "\n".join(lines) + "\n"


def simulate_constant_current(current_a: float, duration_s: float,
                              params: ThermalParams, cooling_on: bool = True,
                              dt: float = 1e-3,
                              initial: Optional[ThermalState] = None
                              ) -> ThermalTrace:
    if duration_s <= 0.0:
        raise ValueError("duration_s must be > 0")
    if not 0.0 < dt <= 0.010:
        raise ValueError("dt must be within (0, 10 ms]")
    n = int(round(duration_s / dt))
    state = initial or ThermalState(params.ambient_c, params.ambient_c)
    p00, p01, p10, p11 = _propagator(params, cooling_on, dt)
    t = np.arange(n + 1) * dt
    tw = np.empty(n + 1)
    th = np.empty(n + 1)
    w, h = state.t_winding, state.t_housing
    for k in range(n + 1):
        tw[k], th[k] = w, h
        if k == n:
            break
        p = current_a ** 2 * params.resistance_at(w)
        ssw, ssh = _steady_point(p, params, cooling_on)
        w, h = (ssw + p00 * (w - ssw) + p01 * (h - ssh),
                ssh + p10 * (w - ssw) + p11 * (h - ssh))
    return ThermalTrace(t=t, current_a=np.full(n + 1, current_a),
                        t_winding=tw, t_housing=th, cooling_on=cooling_on)


def continuous_current_limit(params: ThermalParams,
                             cooling_on: bool = True) -> float:
    """Largest held current whose settled winding temperature stays at
    the insulation limit."""
    s = params.r_wh + params.r_ha(cooling_on)
    r_hot = params.resistance_at(params.limit_c)
    return math.sqrt((params.limit_c - params.ambient_c) / (r_hot * s))


@dataclass(frozen=True)
class ContinuousRating:
    current_a: float
    screw_force_n: float
    joint_torque_nm: float


def continuous_force_limit(params: ThermalParams,
                           actuator: ActuatorParams = VLCA_ACTUATOR,
                           moment_arm_m: float = DEFAULT_MOMENT_ARM,
                           cooling_on: bool = True) -> ContinuousRating:
    if moment_arm_m < 0.0:
        raise ValueError("moment_arm_m must be >= 0")
    i = continuous_current_limit(params, cooling_on)
    f = actuator.drive_constant * i
    return ContinuousRating(current_a=i, screw_force_n=f,
                            joint_torque_nm=f * moment_arm_m)


# ---------------------------------------------------------- calibration

@dataclass(frozen=True)
class ThermalTargets:
    """Bench observations the model is fitted to."""

    cooled_ratio: float = 3.59       # continuous current gain from coolant
    hold_force_n: float = 860.0      # force held indefinitely with coolant
    hold_settle_c: float = 115.0     # settled winding temperature there
    burst_current_a: float = 31.0
    burst_duration_s: float = 0.5
    burst_peak_c: float = 107.0      # winding peak after the burst

    def __post_init__(self):
        if self.cooled_ratio < 1.0:
            raise ValueError("cooled_ratio must be >= 1")
        if min(self.hold_force_n, self.burst_current_a,
               self.burst_duration_s) <= 0.0:
            raise ValueError("targets must be positive")


@dataclass(frozen=True)
class CalibrationReport:
    params: ThermalParams
    residuals: dict


_WH_SHARE = 0.01             # winding-to-housing share of the cooled loop
_LOG_CAP_BOUNDS = (math.log(0.05), math.log(5000.0))  # capacity bracket [J/K]
_TARGET_TOL = 0.05           # all targets must close within 5%


def _golden_min(f, lo: float, hi: float, iters: int = 60):
    """Golden-section minimum of f over [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc < fd else (d, fd)


def calibrate_thermal(actuator: ActuatorParams = VLCA_ACTUATOR,
                      targets: ThermalTargets = ThermalTargets(),
                      r_elec_25: float = 0.45, alpha: float = 0.0039,
                      ambient_c: float = 25.0, limit_c: float = 155.0
                      ) -> CalibrationReport:
    """Fit the network to the bench targets.

    The settled-temperature target fixes the cooled loop resistance in
    closed form and the coolant gain pins the ambient-path ratio exactly
    (r_ha_off = ratio^2 * r_ha_on); the burst-peak target is then closed
    by coordinate descent on the two log-capacities.
    """
    i_hold = targets.hold_force_n / actuator.drive_constant
    rise = targets.hold_settle_c - ambient_c
    if rise <= 0.0:
        raise CalibrationInfeasible("settle target below ambient")
    r_hold = r_elec_25 * (1.0 + alpha * (targets.hold_settle_c - 25.0))
    s_on = rise / (i_hold ** 2 * r_hold)
    r_wh = _WH_SHARE * s_on
    r_ha_on = s_on - r_wh
    r_ha_off = targets.cooled_ratio ** 2 * r_ha_on

    def make(c_w: float, c_h: float) -> ThermalParams:
        return ThermalParams(c_winding=c_w, c_housing=c_h, r_wh=r_wh,
                             r_ha_on=r_ha_on, r_ha_off=r_ha_off,
                             r_elec_25=r_elec_25, alpha=alpha,
                             ambient_c=ambient_c, limit_c=limit_c)

    def burst_peak(c_w: float, c_h: float) -> float:
        tr = simulate_constant_current(targets.burst_current_a,
                                       targets.burst_duration_s,
                                       make(c_w, c_h), cooling_on=True,
                                       dt=1e-3)
        return tr.peak_winding

    def objective(log_cw: float, log_ch: float) -> float:
        return abs(burst_peak(math.exp(log_cw), math.exp(log_ch))
                   - targets.burst_peak_c)

    lo, hi = _LOG_CAP_BOUNDS
    log_cw, log_ch = 0.0, math.log(10.0)
    best = objective(log_cw, log_ch)
    for _ in range(40):
        if best < 1e-6:
            break
        log_ch, best = _golden_min(lambda v: objective(log_cw, v), lo, hi)
        if best < 1e-6:
            break
        log_cw, improved = _golden_min(lambda v: objective(v, log_ch), lo, hi)
        if improved >= best - 1e-12:
            best = improved
            break
        best = improved
    c_w, c_h = math.exp(log_cw), math.exp(log_ch)
    params = make(c_w, c_h)

    ratio = (continuous_current_limit(params, True)
             / continuous_current_limit(params, False))
    residuals = {
        "settle_c": steady_state_winding(i_hold, params, True)
                    - targets.hold_settle_c,
        "burst_peak_c": burst_peak(c_w, c_h) - targets.burst_peak_c,
        "cooled_ratio": ratio - targets.cooled_ratio,
    }
    misses = {
        "settle_c": abs(residuals["settle_c"]) / targets.hold_settle_c,
        "burst_peak_c": abs(residuals["burst_peak_c"]) / targets.burst_peak_c,
        "cooled_ratio": abs(residuals["cooled_ratio"]) / targets.cooled_ratio,
    }
    if max(misses.values()) > _TARGET_TOL:
        worst = max(misses, key=misses.get)
        raise CalibrationInfeasible(
            f"best fit misses {worst} by {misses[worst] * 100:.2f}% "
            f"(tolerance {100 * _TARGET_TOL:.0f}%)", residuals)
    return CalibrationReport(params=params, residuals=residuals)


# ----------------------------------------------------------- power flow

@dataclass(frozen=True)
class PowerSample:
    t_s: float
    input_w: float   # electrical input: copper loss + shaft power
    motor_w: float   # mechanical power at the motor shafts
    joint_w: float   # mechanical power at the joints


POWER_CSV_HEADER = "t_s,input_w,motor_w,joint_w"


def power_samples_to_csv(samples) -> str:
    lines = [POWER_CSV_HEADER]
    last_t = -math.inf
    for s in samples:
        if s.t_s <= last_t:
            raise ValueError("sample times must strictly increase")
        last_t = s.t_s
        lines.append(f"{s.t_s:.10g},{s.input_w:.10g},{s.motor_w:.10g},"
                     f"{s.joint_w:.10g}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PowerSummary:
    samples: tuple                    # PowerSample series, full trace
    drivetrain_efficiency_avg: float  # mean of joint/motor over the subset
    electrical_efficiency_avg: float  # mean of joint/input over the subset
    n_averaged: int                   # samples in the positive-power subset


def power_series(trace, actuator: ActuatorParams = VLCA_ACTUATOR,
                 r_elec_ohm: float = 0.45):
    """Instantaneous (joint, motor shaft, electrical input) power arrays
    [W] along a cascaded leg trace."""
    i = np.asarray(trace.i_m, dtype=float)
    if not np.isfinite(i).all():
        raise ValueError("trace has no motor currents; run the cascaded mode")
    omega = np.asarray(trace.motor_speed_rad_s, dtype=float)
    p_joint = np.sum(trace.tau_applied * trace.qdot, axis=1)
    p_motor = np.sum(actuator.k_tau * i * omega, axis=1)
    p_in = np.sum(i ** 2 * r_elec_ohm + actuator.k_tau * i * omega, axis=1)
    return p_joint, p_motor, p_in


def power_flow(trace, actuator: ActuatorParams = VLCA_ACTUATOR,
               r_elec_ohm: float = 0.45,
               min_motor_w: float = 1.0) -> PowerSummary:
    """Efficiency bookkeeping over the samples where the joints do
    positive work and the shafts deliver more than min_motor_w; trace
    must come from a cascaded leg simulation."""
    p_joint, p_motor, p_in = power_series(trace, actuator, r_elec_ohm)
    samples = tuple(PowerSample(float(trace.t[k]), float(p_in[k]),
                                float(p_motor[k]), float(p_joint[k]))
                    for k in range(len(trace.t)))
    mask = (p_joint > 0.0) & (p_motor > min_motor_w)
    n = int(mask.sum())
    if n < 10:
        raise NoPositivePowerInterval(
            f"only {n} samples with positive joint and motor power")
    drive = float(np.mean(p_joint[mask] / p_motor[mask]))
    elec = float(np.mean(p_joint[mask] / p_in[mask]))
    return PowerSummary(samples=samples, drivetrain_efficiency_avg=drive,
                        electrical_efficiency_avg=elec, n_averaged=n)
