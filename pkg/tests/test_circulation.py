from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import emtorso.circulation as circ
from emtorso.circulation import (IDX, MMHG, ML, CirculationLog, CirculationParams, CircState, advance,
                                 circulation_rhs, coupled_pressure_solve, default_initial_state, rk4_step,
                                 step_volume_map, total_volume, valve_flow)

P = CirculationParams()


def volume_weights(params):
    """d(total volume)/dc: ones on the chamber volumes, C on the capacitor pressures."""
    w = np.zeros(12)
    for k in ("V_LA", "V_LV", "V_RA", "V_RV"):
        w[IDX[k]] = 1.0
    for k, comp in (("p_AR_SYS", params.ar_sys), ("p_VEN_SYS", params.ven_sys),
                    ("p_AR_PUL", params.ar_pul), ("p_VEN_PUL", params.ven_pul)):
        w[IDX[k]] = comp.C
    return w


def test_equal_pressures_and_no_flow_is_stationary():
    t, p0 = 0.5, 10 * MMHG  # every chamber relaxed at t = 0.5 s
    c = np.zeros(12)
    for name, el in (("LA", P.LA), ("LV", P.LV), ("RA", P.RA), ("RV", P.RV)):
        assert el.activation(t, P.period) == 0.0
        c[IDX[f"V_{name}"]] = el.V0 + p0 / el.E_pass
    for k in ("p_AR_SYS", "p_VEN_SYS", "p_AR_PUL", "p_VEN_PUL"):
        c[IDX[k]] = p0
    assert np.abs(circulation_rhs(t, c, P)).max() <= 1e-12 * p0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0, 2.0), st.one_of(st.none(), st.floats(0, 2e4)))
def test_closed_loop_conserves_volume_at_random_states(seed, t, p_LV):
    rng = np.random.default_rng(seed)
    c = default_initial_state() * rng.uniform(0.5, 1.5, 12)
    c[8:] = rng.normal(0, 1e-4, 4)
    dc = circulation_rhs(t, c, P, p_LV=p_LV)
    scale = np.abs(volume_weights(P) * dc).max() + 1e-300
    assert abs(volume_weights(P) @ dc) <= 1e-12 * scale


def test_zero_step_is_identity():
    c = default_initial_state()
    assert np.array_equal(rk4_step(c, 0.3, 0.0, P), c)


def test_rk4_matches_taylor_polynomial(monkeypatch):
    lam = -7.3
    monkeypatch.setattr(circ, "circulation_rhs", lambda t, c, params, p_LV=None, p_RV=None: lam * c)
    dt = 0.05
    z = lam * dt
    got = rk4_step(np.array([2.0]), 0.0, dt, P)[0]
    assert got == pytest.approx(2.0 * (1 + z + z ** 2 / 2 + z ** 3 / 6 + z ** 4 / 24), rel=1e-15)


def test_rk4_fourth_order_convergence(monkeypatch):
    # damped oscillator with time-dependent forcing
    def rhs(t, c, params, p_LV=None, p_RV=None):
        return np.array([c[1], -4.0 * c[0] - 0.3 * c[1] + np.sin(3 * t)])

    monkeypatch.setattr(circ, "circulation_rhs", rhs)

    def run(dt, T=1.0):
        c, t = np.array([1.0, 0.0]), 0.0
        for _ in range(round(T / dt)):
            c = rk4_step(c, t, dt, P)
            t += dt
        return c

    ref = run(1e-4)
    errs = [np.abs(run(dt) - ref).max() for dt in (0.04, 0.02, 0.01)]
    for a, b in zip(errs[:-1], errs[1:]):
        assert 12.0 < a / b < 20.0


def test_rc_decay_matches_exponential(monkeypatch):
    comp = P.ar_sys
    monkeypatch.setattr(circ, "circulation_rhs",
                        lambda t, c, params, p_LV=None, p_RV=None: -c / (comp.R * comp.C))
    tau = comp.R * comp.C
    dt, p = 0.01, np.array([80 * MMHG])
    for n in range(1, 101):
        p = rk4_step(p, 0.0, dt, P)
        assert p[0] == pytest.approx(80 * MMHG * np.exp(-n * dt / tau), rel=1e-8)


def test_valve_rectification_ratio():
    dp = 5 * MMHG
    fwd, back = valve_flow(dp, 0.0, P), valve_flow(-dp, 0.0, P)
    assert fwd > 0 > back
    assert fwd / -back == pytest.approx(P.R_max / P.R_min, rel=1e-12)


def test_one_beat_conserves_total_volume():
    s = CircState(default_initial_state())
    V0 = total_volume(s.c, P)
    for _ in range(800):
        s = advance(s, 1e-3, P)
    assert abs(total_volume(s.c, P) - V0) <= 1e-12 * V0
    assert np.all(s.c[:4] > 0)


def test_beat_produces_ejection():
    s = CircState(default_initial_state())
    log = CirculationLog()
    for _ in range(800):
        s = advance(s, 1e-3, P)
        log.record(s, P)
    a = log.array()
    V_LV = a[:, log.header.index("V_LV")]
    assert (V_LV.max() - V_LV.min()) / ML > 20  # stroke volume in mL
    assert a[:, log.header.index("p_LV")].max() / MMHG > 80


def test_with_period_rescales_timing():
    fast = P.with_period(0.6)
    assert fast.LV.T_contract == pytest.approx(P.LV.T_contract * 0.75)
    assert fast.LA.t_contract == pytest.approx(P.LA.t_contract * 0.75)


def test_invalid_params():
    with pytest.raises(ValueError):
        CirculationParams(R_min=2.0, R_max=1.0)
    with pytest.raises(ValueError):
        CirculationParams(period=0.0)


# -- 3D coupling ------------------------------------------------------------------------


LV_ONLY = (SimpleNamespace(name="LV"),)


def test_step_volume_map_consistent_with_rk4():
    s = CircState(default_initial_state(), 0.2)
    fn, step = step_volume_map(s, 1e-3, P, LV_ONLY)
    p = np.array([90 * MMHG])
    V, J = fn(p)
    assert V[0] == rk4_step(s.c, s.t, 1e-3, P, p_LV=p[0])[IDX["V_LV"]]
    assert np.array_equal(step(p), rk4_step(s.c, s.t, 1e-3, P, p_LV=p[0]))
    h = 1e-2
    fd = (fn(p + h)[0] - fn(p - h)[0]) / (2 * h)
    assert J[0, 0] == pytest.approx(fd[0], rel=1e-5)
    assert J[0, 0] < 0  # more chamber pressure, less blood kept in the chamber


class LinearChamber:
    """Stand-in for the mechanics: V^3D = V_ref + compliance * p."""

    chambers = LV_ONLY

    def __init__(self, V_ref, compliance):
        self.V_ref, self.compliance = V_ref, compliance

    def solve_coupled(self, state, Ta, targets, p0, vol_tol=1e-9, **kw):
        p = np.asarray(p0, float)
        for it in range(50):
            T, dT = targets(p)
            r = self.V_ref + self.compliance * p - T
            if np.abs(r).max() <= vol_tol:
                return self.V_ref + self.compliance * p, p, SimpleNamespace(iterations=it)
            p = p - r / (self.compliance - dT[0, 0])
        raise RuntimeError("no convergence")


def test_coupled_solve_closes_the_volume_constraint():
    s = CircState(default_initial_state(), 0.0, p_LV=5 * MMHG)
    lv = LinearChamber(100 * ML, 1.0 * ML / MMHG)
    V_total = total_volume(s.c, P)
    for _ in range(400):
        V3, s, _ = coupled_pressure_solve(lv, None, None, s, 1e-3, P, vol_tol=1e-15)
        assert abs(s.c[IDX["V_LV"]] - V3[0]) <= 1e-15
    assert s.p_RV is None  # the RV stays a 0D elastance chamber
    assert abs(total_volume(s.c, P) - V_total) <= 1e-12 * V_total
    assert s.t == pytest.approx(0.4)
