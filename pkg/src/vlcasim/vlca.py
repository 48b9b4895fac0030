"""Viscoelastic liquid-cooled actuator: identified plant model, the four
force-feedback loop structures used on it, and stability-margin tabulation.

Force is sensed as spring deflection times stiffness; the motor drives a
belt stage and ball screw, so rotor inertia and viscous drag appear at the
spring multiplied by the squared speed reduction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from .lintf import (DelayedTransferFunction, FrequencyResponsePoint, NoCrossover,
                    Polynomial, StabilityReport, stability_margins, sweep_response,
                    tf_eval)


class MissingFilterCutoff(Exception):
    """Controller structure needs a filter cutoff that was left unset."""


@dataclass(frozen=True)
class ActuatorParams:
    eta: float     # ball-screw efficiency [-]
    k_tau: float   # motor torque constant [N*m/A]
    n_m: float     # speed reduction, motor angle per screw travel [rad/m]
    j_m: float     # rotor + pulley inertia [kg*m^2]
    b_m: float     # motor-side viscous drag [N*m*s]
    m_r: float     # translating rod/nut mass [kg]
    b_r: float     # spring element damping [N*s/m]
    k_r: float     # spring element stiffness [N/m]

    def __post_init__(self):
        for name in ("eta", "k_tau", "n_m", "j_m", "m_r", "k_r"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("b_m", "b_r"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")
        if self.eta > 1.0:
            raise ValueError("eta must be <= 1 (passive drivetrain)")

    @property
    def drive_constant(self) -> float:
        """Screw-axis force per amp [N/A]."""
        return self.eta * self.k_tau * self.n_m

    @property
    def effective_mass(self) -> float:
        """Reflected rotor inertia plus translating mass [kg]."""
        return self.j_m * self.n_m ** 2 + self.m_r

    @property
    def effective_damping(self) -> float:
        """Reflected motor drag plus spring damping [N*s/m]."""
        return self.b_m * self.n_m ** 2 + self.b_r

    @property
    def resonance_rad_s(self) -> float:
        return math.sqrt(self.k_r / self.effective_mass)

    @property
    def damping_ratio(self) -> float:
        return self.effective_damping / (2.0 * math.sqrt(self.k_r * self.effective_mass))


# speed reduction: 2.111 belt stage into a 4 mm lead ball screw
VLCA_SPEED_REDUCTION = 2.0 * math.pi * 2.111 / 0.004  # [rad/m]

# joint lever arm that maps the 5.9 kN screw-force rating to the 270 N*m
# joint-torque rating [m]
DEFAULT_MOMENT_ARM = 270.0 / 5900.0

# identified constants of the 4.5 kN knee/ankle actuator
VLCA_ACTUATOR = ActuatorParams(
    eta=0.9,
    k_tau=0.0448,
    n_m=VLCA_SPEED_REDUCTION,
    j_m=3.8e-5,
    b_m=2.0e-4,
    m_r=1.3,
    b_r=2.0e4,
    k_r=5.5e6,
)


class ControllerKind(Enum):
    PDF = "pd_f"          # P on force error, filtered force derivative
    PDM = "pd_m"          # P on force error, motor-velocity damping
    PIDM = "pid_m"        # PI on force error, motor-velocity damping
    PDM_DOB = "pd_m_dob"  # PDM inner loop plus disturbance observer


@dataclass(frozen=True)
class ControllerGains:
    k_p: float = 4.0
    k_dm: float = 15.0            # motor-velocity damping [A*s/rad scaled]
    k_df: Optional[float] = None  # force-derivative gain; default matches k_dm
    k_i: float = 300.0
    q_d_cutoff: Optional[float] = 2.0 * math.pi * 50.0    # derivative filter [rad/s]
    q_taud_cutoff: Optional[float] = 2.0 * math.pi * 15.0  # observer filter [rad/s]
    q_taud_zeta: float = 2.0 ** -0.5  # Butterworth damping, peak-free magnitude
    delay_t: float = 1e-3         # loop transport delay [s]

    def __post_init__(self):
        if self.k_p < 0.0 or self.k_dm < 0.0 or self.k_i < 0.0:
            raise ValueError("gains must be >= 0")
        if self.k_df is not None and self.k_df < 0.0:
            raise ValueError("k_df must be >= 0")
        for name in ("q_d_cutoff", "q_taud_cutoff"):
            v = getattr(self, name)
            if v is not None and v <= 0.0:
                raise ValueError(f"{name} must be > 0 when set")
        if self.q_taud_zeta <= 0.0:
            raise ValueError("q_taud_zeta must be > 0")
        if self.delay_t < 0.0:
            raise ValueError("delay_t must be >= 0")

    def resolved_k_df(self, params: ActuatorParams) -> float:
        """Force-derivative gain equivalent to k_dm motor-velocity damping."""
        if self.k_df is not None:
            return self.k_df
        return self.k_dm * params.n_m / params.k_r


def plant_px(params: ActuatorParams) -> DelayedTransferFunction:
    """Screw position per amp: N / (M s^2 + B s + k_r)."""
    return DelayedTransferFunction(
        Polynomial((params.drive_constant,)),
        Polynomial((params.k_r, params.effective_damping, params.effective_mass)),
    )


def force_plant(params: ActuatorParams) -> DelayedTransferFunction:
    """Spring force per commanded motor force, k_r*P_x/N; unit DC gain."""
    return DelayedTransferFunction(
        Polynomial((params.k_r,)),
        Polynomial((params.k_r, params.effective_damping, params.effective_mass)),
    )


def q_taud_tf(gains: ControllerGains) -> DelayedTransferFunction:
    """Second-order low-pass used by the disturbance observer."""
    if gains.q_taud_cutoff is None:
        raise MissingFilterCutoff("q_taud_cutoff is unset")
    w, z = gains.q_taud_cutoff, gains.q_taud_zeta
    return DelayedTransferFunction(Polynomial((w * w,)),
                                   Polynomial((w * w, 2.0 * z * w, 1.0)))


def q_d_tf(gains: ControllerGains) -> DelayedTransferFunction:
    """First-order filtered differentiator w*s/(s + w)."""
    if gains.q_d_cutoff is None:
        raise MissingFilterCutoff("q_d_cutoff is unset")
    w = gains.q_d_cutoff
    return DelayedTransferFunction(Polynomial((0.0, w)), Polynomial((w, 1.0)))


def _den_poly(params: ActuatorParams) -> Polynomial:
    return Polynomial((params.k_r, params.effective_damping, params.effective_mass))


def open_loop_tf(kind: ControllerKind, params: ActuatorParams,
                 gains: ControllerGains) -> DelayedTransferFunction:
    """Loop transmission for margin analysis, transport delay attached."""
    kr, nm = params.k_r, params.n_m
    kp, kdm, ki = gains.k_p, gains.k_dm, gains.k_i
    den_p = _den_poly(params)
    t = gains.delay_t

    if kind is ControllerKind.PDF:
        if gains.q_d_cutoff is None:
            raise MissingFilterCutoff("q_d_cutoff is unset")
        wd = gains.q_d_cutoff
        kdf = gains.resolved_k_df(params)
        # kr*(kp + kdf*wd*s/(s+wd)) / den_p
        num = Polynomial((kr * kp * wd, kr * (kp + kdf * wd)))
        den = Polynomial((wd, 1.0)) * den_p
        return DelayedTransferFunction(num, den, t)
    if kind is ControllerKind.PDM:
        num = Polynomial((kr * kp, kdm * nm))
        return DelayedTransferFunction(num, den_p, t)
    if kind is ControllerKind.PIDM:
        num = Polynomial((kr * ki, kr * kp, kdm * nm))
        den = den_p * Polynomial((0.0, 1.0))
        return DelayedTransferFunction(num, den, t)
    if kind is ControllerKind.PDM_DOB:
        if gains.q_taud_cutoff is None:
            raise MissingFilterCutoff("q_taud_cutoff is unset")
        w, z = gains.q_taud_cutoff, gains.q_taud_zeta
        nq = Polynomial((w * w,))
        dq = Polynomial((w * w, 2.0 * z * w, 1.0))
        high = Polynomial((0.0, 2.0 * z * w, 1.0))  # dq - nq
        ctrl = Polynomial((kr * kp, kdm * nm))
        # the drive constant cancels between the observer path and the
        # motor-side plant, leaving a gain-free loop shape
        num = nq * den_p + ctrl * dq
        den = high * den_p
        return DelayedTransferFunction(num, den, t)
    raise ValueError(f"unknown controller kind: {kind!r}")


class ClosedLoopResponse:
    """Frequency-domain evaluator for a closed force loop.

    The transport delay sits inside the loop, so the closed response is not
    rational; it supports evaluation and sweeps but not composition.
    """

    def __init__(self, kind: ControllerKind, params: ActuatorParams,
                 gains: ControllerGains):
        self.kind = kind
        self.params = params
        self.gains = gains
        if kind is ControllerKind.PDF and gains.q_d_cutoff is None:
            raise MissingFilterCutoff("q_d_cutoff is unset")
        if kind is ControllerKind.PDM_DOB and gains.q_taud_cutoff is None:
            raise MissingFilterCutoff("q_taud_cutoff is unset")

    def eval(self, omega: float) -> complex:
        if omega <= 0.0:
            raise ValueError("omega must be > 0")
        p, g = self.params, self.gains
        s = 1j * omega
        kr, nm, n = p.k_r, p.n_m, p.drive_constant
        den_p = p.k_r + p.effective_damping * s + p.effective_mass * s * s
        px = n / den_p
        e = np.exp(-s * g.delay_t)
        if self.kind is ControllerKind.PDF:
            wd = g.q_d_cutoff
            qd = wd * s / (s + wd)
            ff = kr * px * (g.k_p + 1.0) / n
            loop = kr * px * (g.k_p + g.resolved_k_df(p) * qd) / n
            return ff / (1.0 + e * loop)
        if self.kind is ControllerKind.PDM:
            ff = kr * px * (g.k_p + 1.0) / n
            loop = px * (kr * g.k_p + g.k_dm * s * nm) / n
            return ff / (1.0 + e * loop)
        if self.kind is ControllerKind.PIDM:
            pi = g.k_p + g.k_i / s
            ff = kr * px * (pi + 1.0) / n
            loop = px * (kr * pi + g.k_dm * s * nm) / n
            return ff / (1.0 + e * loop)
        # disturbance observer wrapped around the PDM loop
        w, z = g.q_taud_cutoff, g.q_taud_zeta
        q = w * w / (s * s + 2.0 * z * w * s + w * w)
        ff = kr * px * (g.k_p + 1.0) / n
        x = px * (kr * g.k_p + g.k_dm * s * nm) / n
        return ff / ((1.0 - q) + e * (q + x))

    def sweep(self, omega_min: float, omega_max: float,
              points_per_decade: int = 48) -> list:
        return sweep_response(self.eval, omega_min, omega_max, points_per_decade)


def closed_loop_tf(kind: ControllerKind, params: ActuatorParams,
                   gains: ControllerGains) -> ClosedLoopResponse:
    return ClosedLoopResponse(kind, params, gains)


@dataclass(frozen=True)
class MarginEntry:
    label: str
    report: Optional[StabilityReport]
    error: Optional[str] = None


MARGIN_TABLE_ORDER = (ControllerKind.PDF, ControllerKind.PDM,
                      ControllerKind.PIDM, ControllerKind.PDM_DOB)


def margin_table(params: ActuatorParams, gains: ControllerGains) -> list:
    """Stability margins for each loop structure plus the bare force plant.

    A loop without a unity crossing gets an error entry instead of aborting
    the whole table.
    """
    entries = []
    for kind in MARGIN_TABLE_ORDER:
        try:
            rep = stability_margins(open_loop_tf(kind, params, gains))
            entries.append(MarginEntry(kind.value, rep))
        except NoCrossover as exc:
            entries.append(MarginEntry(kind.value, None, str(exc)))
    plant = replace(force_plant(params), delay_s=gains.delay_t)
    try:
        entries.append(MarginEntry("plant", stability_margins(plant)))
    except NoCrossover as exc:
        entries.append(MarginEntry("plant", None, str(exc)))
    return entries


MARGIN_CSV_HEADER = "controller,phase_margin_deg,gain_crossover_hz,gain_margin_db"


def margin_table_to_csv(entries) -> str:
    lines = [MARGIN_CSV_HEADER]
    for e in entries:
        if e.report is None:
            lines.append(f"{e.label},,,")
            continue
        r = e.report
        gm = "" if math.isinf(r.gain_margin_db) else f"{r.gain_margin_db:.10g}"
        f_hz = r.gain_crossover_rad_s / (2.0 * math.pi)
        lines.append(f"{e.label},{r.phase_margin_deg:.10g},{f_hz:.10g},{gm}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class MarginCalibration:
    delay_t: float
    q_d_cutoff: float
    pm_pdf_deg: float
    pm_pdm_deg: float
    pm_pidm_deg: float
    pm_pdm_dob_deg: float
    objective_deg: float  # worst |target miss| across the two targets


def calibrate_margins(params: ActuatorParams, gains: ControllerGains,
                      pm_pdf_target: float = 17.1, pm_pdm_target: float = 47.6,
                      delay_grid=None, q_d_grid=None) -> MarginCalibration:
    """Grid search over loop delay and derivative-filter cutoff that brings
    the PDF and PDM phase margins closest to the given targets.

    Returns the best grid point; the caller decides whether the residual
    miss is acceptable.
    """
    if delay_grid is None:
        delay_grid = np.linspace(0.25e-3, 2.5e-3, 10)
    if q_d_grid is None:
        q_d_grid = 2.0 * math.pi * np.geomspace(20.0, 200.0, 16)
    best = None
    for t in delay_grid:
        g_t = replace(gains, delay_t=float(t))
        pm_pdm = stability_margins(
            open_loop_tf(ControllerKind.PDM, params, g_t)).phase_margin_deg
        for wd in q_d_grid:
            g = replace(g_t, q_d_cutoff=float(wd))
            pm_pdf = stability_margins(
                open_loop_tf(ControllerKind.PDF, params, g)).phase_margin_deg
            obj = max(abs(pm_pdf - pm_pdf_target), abs(pm_pdm - pm_pdm_target))
            if best is None or obj < best[0]:
                best = (obj, float(t), float(wd), pm_pdf, pm_pdm)
    obj, t, wd, pm_pdf, pm_pdm = best
    g = replace(gains, delay_t=t, q_d_cutoff=wd)
    pm_pidm = stability_margins(
        open_loop_tf(ControllerKind.PIDM, params, g)).phase_margin_deg
    pm_dob = stability_margins(
        open_loop_tf(ControllerKind.PDM_DOB, params, g)).phase_margin_deg
    return MarginCalibration(delay_t=t, q_d_cutoff=wd, pm_pdf_deg=pm_pdf,
                             pm_pdm_deg=pm_pdm, pm_pidm_deg=pm_pidm,
                             pm_pdm_dob_deg=pm_dob, objective_deg=obj)
