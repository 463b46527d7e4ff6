from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emtorso.ionic import AlievPanfilov, action_potential_duration, get_ionic_model, simulate_cell

# APD90 from u' = 0.3, w = 0: Radau (rtol 1e-12) on the raw two-variable equations, 2e6-point dense output
REFERENCE_APD = 0.34052001550756744  # s
# peak of w along the same trajectory
REFERENCE_W_PEAK = 2.035172176634644


def test_rest_is_fixed_point():
    m = AlievPanfilov()
    u0, w0 = m.resting_state()
    I, dw = m.rhs(np.array([u0]), w0[:, None])
    assert I[0] == 0.0 and dw[0, 0] == 0.0


def test_cubic_root_at_threshold():
    m = AlievPanfilov()
    I, _ = m.rhs(np.array([m.v_rest + m.a * m.v_amp]), np.zeros((1, 1)))
    assert abs(I[0]) <= 1e-12


def test_apd_matches_reference_ode():
    m = AlievPanfilov()
    tr = simulate_cell(m, m.v_rest + 0.3 * m.v_amp, 0.8, 1e-4)
    assert tr.u[-1] == pytest.approx(m.v_rest, abs=1.0)  # back at rest
    apd = action_potential_duration(tr.t, tr.u)
    assert apd == pytest.approx(REFERENCE_APD, rel=0.01)


def test_calcium_surrogate_normalized():
    m = AlievPanfilov()
    assert m.w_peak == pytest.approx(REFERENCE_W_PEAK, rel=0.01)
    tr = simulate_cell(m, m.v_rest + 0.3 * m.v_amp, 0.8, 1e-4)
    ca = m.calcium(tr.w.T)
    assert ca.min() == 0.0 and ca.max() == pytest.approx(1.0, abs=0.02)


def test_subthreshold_decays():
    m = AlievPanfilov()
    tr = simulate_cell(m, m.v_rest + 0.1 * m.v_amp, 0.2, 1e-4)
    assert tr.u.max() <= m.v_rest + 0.1 * m.v_amp + 1e-12
    assert tr.u[-1] == pytest.approx(m.v_rest, abs=0.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(-90, 30), st.floats(0, 2.5))
def test_rhs_finite(u, w):
    I, dw = AlievPanfilov().rhs(np.array([u]), np.array([[w]]))
    assert np.isfinite(I).all() and np.isfinite(dw).all()


def test_registry():
    assert isinstance(get_ionic_model("aliev_panfilov"), AlievPanfilov)
    with pytest.raises(ValueError, match="unknown ionic model"):
        get_ionic_model("ttp06")
