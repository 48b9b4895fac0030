"""Actuator model, force-control loop shapes, and the margin table."""
import cmath
import math
from dataclasses import replace

import numpy as np
import pytest

from vlcasim.lintf import (DelayedTransferFunction, Polynomial, compose,
                           stability_margins)
from vlcasim.vlca import (ActuatorParams, ControllerGains, ControllerKind,
                          DEFAULT_MOMENT_ARM, MARGIN_CSV_HEADER,
                          MissingFilterCutoff, VLCA_ACTUATOR,
                          VLCA_SPEED_REDUCTION, calibrate_margins,
                          closed_loop_tf, force_plant, margin_table,
                          margin_table_to_csv, open_loop_tf, plant_px,
                          q_taud_tf)

P = VLCA_ACTUATOR
G = ControllerGains()


# ------------------------------------------------------------------- params

def test_speed_reduction_from_belt_and_screw_lead():
    assert VLCA_SPEED_REDUCTION == pytest.approx(3315.951045864027, rel=1e-12)
    assert P.n_m == VLCA_SPEED_REDUCTION


def test_drive_constant():
    assert P.drive_constant == pytest.approx(133.69914616923757, rel=1e-12)
    assert P.drive_constant == pytest.approx(P.eta * P.k_tau * P.n_m, rel=1e-15)


def test_reflected_mass_and_damping():
    assert P.effective_mass == pytest.approx(419.13019086553595, rel=1e-12)
    assert P.effective_damping == pytest.approx(22199.10626771335, rel=1e-12)
    # the reflected rotor inertia dominates the translating hardware
    assert P.j_m * P.n_m ** 2 > 100.0 * P.m_r


def test_resonance_and_damping_ratio():
    assert P.resonance_rad_s == pytest.approx(114.55310679209889, rel=1e-12)
    assert P.resonance_rad_s == pytest.approx(114.6, rel=0.005)
    zeta = P.effective_damping / (2.0 * math.sqrt(P.k_r * P.effective_mass))
    assert P.damping_ratio == pytest.approx(zeta, rel=1e-15)
    assert P.damping_ratio == pytest.approx(0.23117969008859263, rel=1e-12)


def test_param_validation():
    with pytest.raises(ValueError):
        replace(P, k_r=0.0)
    with pytest.raises(ValueError):
        replace(P, eta=1.2)
    with pytest.raises(ValueError):
        replace(P, b_r=-1.0)
    replace(P, b_m=0.0)  # drag may vanish


def test_default_moment_arm_maps_rated_force_to_rated_torque():
    assert DEFAULT_MOMENT_ARM * 5900.0 == pytest.approx(270.0, rel=1e-12)


def test_gain_validation():
    with pytest.raises(ValueError):
        ControllerGains(k_p=-1.0)
    with pytest.raises(ValueError):
        ControllerGains(q_d_cutoff=0.0)
    with pytest.raises(ValueError):
        ControllerGains(delay_t=-1e-3)
    with pytest.raises(ValueError):
        ControllerGains(q_taud_zeta=0.0)


def test_force_derivative_gain_defaults_to_matched_damping():
    assert G.k_df is None
    assert G.resolved_k_df(P) == pytest.approx(G.k_dm * P.n_m / P.k_r,
                                               rel=1e-15)
    g2 = replace(G, k_df=0.012)
    assert g2.resolved_k_df(P) == 0.012


# -------------------------------------------------------------------- plant

def test_position_plant_coefficients():
    px = plant_px(P)
    # den normalized to a monic leading coefficient; compare ratios
    den = px.den.coefficients
    assert den[2] == 1.0
    assert den[1] == pytest.approx(P.effective_damping / P.effective_mass,
                                   rel=1e-12)
    assert den[0] == pytest.approx(P.k_r / P.effective_mass, rel=1e-12)
    assert px.dc_gain() == pytest.approx(2.4308935667134106e-05, rel=1e-12)
    assert px.dc_gain() == pytest.approx(2.431e-5, rel=1e-3)


def test_position_plant_dc_tracks_spring_stiffness():
    soft = replace(P, k_r=P.k_r / 10.0)
    assert plant_px(soft).dc_gain() == pytest.approx(10.0 * plant_px(P).dc_gain(),
                                                     rel=1e-12)


def test_force_plant_unity_dc():
    fp = force_plant(P)
    assert fp.dc_gain() == pytest.approx(1.0, abs=1e-12)
    # resonant peak of an underdamped pair sits just below resonance
    w = np.geomspace(10.0, 1e3, 4000)
    mags = np.abs([fp.eval(float(wi)) for wi in w])
    z = P.damping_ratio
    assert np.max(mags) == pytest.approx(1.0 / (2.0 * z * math.sqrt(1 - z * z)),
                                         rel=1e-4)


def test_observer_filter_is_peak_free_unity_lowpass():
    q = q_taud_tf(G)
    assert q.dc_gain() == pytest.approx(1.0, abs=1e-12)
    w = np.geomspace(1e-2, 1e6, 2000)
    mags = np.abs([q.eval(float(wi)) for wi in w])
    assert np.max(mags) <= 1.0 + 1e-9
    wc = G.q_taud_cutoff
    for frac in (0.1, 1.0, 10.0):
        assert abs(q.eval(frac * wc)) < 1.0


# ----------------------------------------------------------- open-loop shapes

def test_missing_filter_cutoffs_are_rejected():
    g_no_qd = replace(G, q_d_cutoff=None)
    with pytest.raises(MissingFilterCutoff):
        open_loop_tf(ControllerKind.PDF, P, g_no_qd)
    with pytest.raises(MissingFilterCutoff):
        closed_loop_tf(ControllerKind.PDF, P, g_no_qd)
    g_no_qt = replace(G, q_taud_cutoff=None)
    with pytest.raises(MissingFilterCutoff):
        open_loop_tf(ControllerKind.PDM_DOB, P, g_no_qt)
    with pytest.raises(MissingFilterCutoff):
        closed_loop_tf(ControllerKind.PDM_DOB, P, g_no_qt)
    # the other structures do not need those filters
    open_loop_tf(ControllerKind.PDM, P, g_no_qd)
    open_loop_tf(ControllerKind.PIDM, P, g_no_qt)


def test_open_loop_carries_the_transport_delay():
    for kind in ControllerKind:
        assert open_loop_tf(kind, P, G).delay_s == G.delay_t
    g0 = replace(G, delay_t=0.0)
    assert open_loop_tf(ControllerKind.PDM, P, g0).delay_s == 0.0


def test_integral_action_gives_infinite_dc_loop_gain():
    lo = open_loop_tf(ControllerKind.PIDM, P, G)
    assert abs(lo.eval(1e-6)) > 1e5
    # integrator slope: two decades down in frequency, two decades up in gain
    assert abs(lo.eval(1e-6)) / abs(lo.eval(1e-4)) == pytest.approx(100.0,
                                                                    rel=0.01)


def test_observer_loop_dc_gain_is_huge():
    lo = open_loop_tf(ControllerKind.PDM_DOB, P, G)
    assert abs(lo.eval(1e-6)) > abs(lo.eval(1e-5)) > abs(lo.eval(1e-4)) > 1e3


def test_dropping_integral_gain_recovers_the_simpler_loop():
    # the PI structure carries a 1/s factor; with the integral gain at zero
    # that factor is shared top and bottom, and series-composing with
    # identity cancels it, leaving the simpler loop coefficient for
    # coefficient
    g0 = replace(G, k_i=0.0)
    one = DelayedTransferFunction(Polynomial((1.0,)), Polynomial((1.0,)))
    a = compose("series", open_loop_tf(ControllerKind.PIDM, P, g0), one)
    b = compose("series", open_loop_tf(ControllerKind.PDM, P, g0), one)
    assert a.num.coefficients == b.num.coefficients
    assert a.den.coefficients == b.den.coefficients
    assert a.delay_s == b.delay_s


# ------------------------------------------------------------------- margins

def test_margin_table_rows_and_values():
    entries = margin_table(P, G)
    assert [e.label for e in entries] == ["pd_f", "pd_m", "pid_m", "pd_m_dob",
                                          "plant"]
    rep = {e.label: e.report for e in entries}
    assert all(r is not None for r in rep.values())

    assert rep["pd_f"].phase_margin_deg == pytest.approx(10.663557138611225,
                                                         rel=1e-9)
    assert rep["pd_f"].gain_crossover_rad_s == pytest.approx(288.9452529916208,
                                                             rel=1e-9)
    assert rep["pd_f"].gain_margin_db == pytest.approx(5.077526974218976,
                                                       rel=1e-9)

    assert rep["pd_m"].phase_margin_deg == pytest.approx(29.383283201882307,
                                                         rel=1e-9)
    assert rep["pd_m"].gain_crossover_rad_s == pytest.approx(270.06778155620424,
                                                             rel=1e-9)
    assert rep["pd_m"].gain_margin_db == pytest.approx(20.102885210196302,
                                                       rel=1e-9)

    assert rep["pid_m"].phase_margin_deg == pytest.approx(15.828022225264306,
                                                          rel=1e-9)
    assert rep["pid_m"].gain_crossover_rad_s == pytest.approx(256.98244372031263,
                                                              rel=1e-9)

    assert rep["pd_m_dob"].phase_margin_deg == pytest.approx(24.63662018305621,
                                                             rel=1e-9)
    assert rep["pd_m_dob"].gain_crossover_rad_s == pytest.approx(
        271.32889020471833, rel=1e-9)
    assert rep["pd_m_dob"].gain_margin_db == pytest.approx(19.421275559766894,
                                                           rel=1e-9)

    assert rep["plant"].phase_margin_deg == pytest.approx(29.394016637661593,
                                                          rel=1e-9)
    assert rep["plant"].gain_crossover_rad_s == pytest.approx(
        153.09986528080336, rel=1e-9)


def test_motor_side_damping_beats_force_derivative_margin():
    entries = {e.label: e.report for e in margin_table(P, G)}
    assert entries["pd_m"].phase_margin_deg > entries["pd_f"].phase_margin_deg
    # the observer recovers most of the margin the integral action costs
    assert entries["pd_m_dob"].phase_margin_deg > entries["pid_m"].phase_margin_deg


def test_margins_shrink_with_transport_delay():
    want = {0.0: 44.85702726751387, 0.25e-3: 40.98859125110599,
            0.5e-3: 37.1201552346981, 1.0e-3: 29.383283201882307,
            2.5e-3: 6.172667103434975}
    last = math.inf
    for t, pm in want.items():
        rep = stability_margins(open_loop_tf(ControllerKind.PDM, P,
                                             replace(G, delay_t=t)))
        assert rep.phase_margin_deg == pytest.approx(pm, rel=1e-9)
        assert rep.phase_margin_deg < last
        last = rep.phase_margin_deg


def test_observer_crossover_is_delay_independent():
    for t in (0.0, 0.25e-3, 1.0e-3):
        rep = stability_margins(open_loop_tf(ControllerKind.PDM_DOB, P,
                                             replace(G, delay_t=t)))
        assert rep.gain_crossover_rad_s == pytest.approx(271.32889020471833,
                                                         rel=1e-9)
    rep0 = stability_margins(open_loop_tf(ControllerKind.PDM_DOB, P,
                                          replace(G, delay_t=0.0)))
    assert rep0.phase_margin_deg == pytest.approx(40.18262045175507, rel=1e-9)
    assert math.isinf(rep0.gain_margin_db)


def test_margin_table_reports_errors_without_aborting():
    feeble = ControllerGains(k_p=1e-12, k_dm=1e-12, k_i=0.0)
    entries = margin_table(P, feeble)
    assert len(entries) == 5
    by_label = {e.label: e for e in entries}
    for label in ("pd_f", "pd_m", "pid_m"):
        assert by_label[label].report is None
        assert "unity" in by_label[label].error
    # the observer path keeps infinite DC gain regardless of the feedback
    # gains, so its loop still crosses unity; so does the bare plant through
    # its resonant peak
    assert by_label["pd_m_dob"].report is not None
    assert by_label["plant"].report is not None


def test_margin_csv_layout():
    text = margin_table_to_csv(margin_table(P, G))
    lines = text.strip().splitlines()
    assert lines[0] == MARGIN_CSV_HEADER
    assert len(lines) == 6
    row = dict(zip(lines[0].split(","), lines[2].split(",")))
    assert row["controller"] == "pd_m"
    assert float(row["gain_crossover_hz"]) == pytest.approx(
        270.06778155620424 / (2.0 * math.pi), rel=1e-9)
    # error rows keep the label and leave the numbers empty
    feeble = margin_table(P, ControllerGains(k_p=1e-12, k_dm=1e-12, k_i=0.0))
    bad_line = margin_table_to_csv(feeble).strip().splitlines()[1]
    assert bad_line == "pd_f,,,"


def test_infinite_gain_margin_serializes_empty():
    g0 = replace(G, delay_t=0.0)
    entries = margin_table(P, g0)
    text = margin_table_to_csv(entries)
    dob_line = [ln for ln in text.splitlines() if ln.startswith("pd_m_dob")][0]
    assert dob_line.endswith(",")  # empty gain-margin cell


def test_single_point_calibration_is_exact():
    cal = calibrate_margins(P, G, delay_grid=[0.25e-3],
                            q_d_grid=[2.0 * math.pi * 20.0])
    assert cal.delay_t == pytest.approx(0.25e-3)
    assert cal.q_d_cutoff == pytest.approx(2.0 * math.pi * 20.0)
    assert cal.pm_pdf_deg == pytest.approx(13.99503895, abs=1e-6)
    assert cal.pm_pdm_deg == pytest.approx(40.98859125, abs=1e-6)
    assert cal.pm_pidm_deg == pytest.approx(26.8710293, abs=1e-6)
    assert cal.pm_pdm_dob_deg == pytest.approx(36.29612038, abs=1e-6)
    assert cal.objective_deg == pytest.approx(
        max(abs(cal.pm_pdf_deg - 17.1), abs(cal.pm_pdm_deg - 47.6)), rel=1e-12)


# -------------------------------------------------------------- closed loops

def test_closed_loop_matches_loop_quotient():
    # each closed response equals feedforward/(1 + open loop); the observer
    # structure folds its filter into the effective feedforward
    fp = force_plant(P)
    for kind in ControllerKind:
        cl = closed_loop_tf(kind, P, G)
        lo = open_loop_tf(kind, P, G)
        for w in np.geomspace(0.5, 500.0, 20):
            w = float(w)
            if kind is ControllerKind.PIDM:
                ff = fp.eval(w) * (G.k_p + G.k_i / (1j * w) + 1.0)
            else:
                ff = fp.eval(w) * (G.k_p + 1.0)
            if kind is ControllerKind.PDM_DOB:
                ff /= 1.0 - q_taud_tf(G).eval(w)
            want = ff / (1.0 + lo.eval(w))
            assert cmath.isclose(cl.eval(w), want, rel_tol=1e-9)


def test_closed_loop_dc_is_unity_for_every_structure():
    # the command feedforward cancels the proportional droop, so even the
    # integral-free loops track DC exactly
    for kind in ControllerKind:
        cl = closed_loop_tf(kind, P, G)
        assert abs(cl.eval(1e-5)) == pytest.approx(1.0, abs=1e-6)


def test_closed_loop_sweep_runs():
    cl = closed_loop_tf(ControllerKind.PDM_DOB, P, G)
    pts = cl.sweep(1.0, 500.0, 24)
    mags = [p.magnitude for p in pts]
    assert len(pts) > 50
    assert mags[-1] < 0.5  # rolled off past crossover


def test_closed_loop_rejects_nonpositive_frequency():
    cl = closed_loop_tf(ControllerKind.PDM, P, G)
    with pytest.raises(ValueError):
        cl.eval(0.0)
