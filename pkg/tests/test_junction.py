import numpy as np
import pytest
from hypothesis import given, strategies as st

from stmsim.junction import (InfeasibleSetpoint, JunctionDomainError, JunctionParams, TipCrash,
                             TipSampleState, bias_factor, conductance_exponent, decay_constant,
                             didz_analytic, log_current, sigma_from_exponent, steady_state_gap,
                             tunneling_current)

# the reference examples use a small conductivity at the reference bias, where f = sigma V
P = JunctionParams()
S = 0.2


def state(delta, sigma=S, phi=4.5):
    return TipSampleState.from_gap(delta, sigma, phi)


def test_current_at_contact_equals_prefactor():
    assert tunneling_current(state(0.0), P) == pytest.approx(-0.5, rel=1e-15)


def test_current_at_half_nm():
    i = tunneling_current(state(0.5), P)
    assert i == pytest.approx(-0.5 * np.exp(-10.25 * np.sqrt(4.5) * 0.5), rel=1e-12)
    assert i == pytest.approx(-9.5e-6, rel=0.01)


def test_negative_gap_signals_crash():
    with pytest.raises(TipCrash):
        tunneling_current(state(-0.01), P)


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_input_is_domain_error(bad):
    with pytest.raises(JunctionDomainError):
        tunneling_current(state(bad), P)
    with pytest.raises(JunctionDomainError):
        tunneling_current(TipSampleState(0.5, 0.0, S, bad), P)


def test_log_current_examples():
    assert log_current(-0.5, P) == pytest.approx(np.log(0.5))
    assert log_current(-1.0, P) == 0.0
    assert log_current(0.0, P) == pytest.approx(np.log(P.i_floor))


def test_didz_at_contact():
    assert didz_analytic(state(0.0), P) == pytest.approx(10.25 * np.sqrt(4.5) * 0.5, rel=1e-12)
    assert didz_analytic(state(0.0), P) == pytest.approx(10.87, abs=0.01)


def test_didz_matches_finite_difference():
    d, h = 0.4, 1e-6
    fd = (tunneling_current(state(d + h), P) - tunneling_current(state(d - h), P)) / (2 * h)
    assert fd == pytest.approx(didz_analytic(state(d), P), rel=1e-6)


@given(st.floats(0.0, 2.0), st.floats(0.5, 8.0), st.floats(1e-2, 1e5))
def test_log_gradient_minus_log_current_is_decay_constant(d, phi, sigma):
    s = state(d, sigma, phi)
    diff = log_current(didz_analytic(s, P), P) - log_current(tunneling_current(s, P), P)
    if np.abs(tunneling_current(s, P)) * decay_constant(phi, P) > P.i_floor and abs(tunneling_current(s, P)) > P.i_floor:
        assert diff == pytest.approx(np.log(10.25 * np.sqrt(phi)), abs=1e-9)


def test_steady_state_gap_examples():
    assert steady_state_gap(np.log(0.5), "current", S, 4.5, P) == pytest.approx(0.0, abs=1e-15)
    sp = np.log(10.25 * np.sqrt(4.5) * 0.5)
    assert steady_state_gap(sp, "didz", S, 4.5, P) == pytest.approx(0.0, abs=1e-14)


def test_db_shift_smaller_in_didz_mode():
    sp_i = np.log(0.5) - 8.0
    sp_d = sp_i + np.log(10.25 * np.sqrt(4.5))
    shift_i = steady_state_gap(sp_i, "current", 2 * S, 2.25, P) - steady_state_gap(sp_i, "current", S, 4.5, P)
    shift_d = steady_state_gap(sp_d, "didz", 2 * S, 2.25, P) - steady_state_gap(sp_d, "didz", S, 4.5, P)
    assert abs(shift_d) < abs(shift_i)
    # the two closed forms differ by ln(k_T / k_D) / k_D
    k_t, k_d = 10.25 * np.sqrt(4.5), 10.25 * np.sqrt(2.25)
    assert shift_i - shift_d == pytest.approx(np.log(k_t / k_d) / k_d, rel=1e-9)


@given(st.floats(-12.0, 2.0), st.floats(0.5, 8.0), st.floats(1e-2, 1e5), st.sampled_from(["current", "didz"]))
def test_steady_state_gap_inverts_forward_model(sp, phi, sigma, mode):
    d = steady_state_gap(sp, mode, sigma, phi, P)
    if d < 0:
        return
    s = state(d, sigma, phi)
    v = tunneling_current(s, P) if mode == "current" else didz_analytic(s, P)
    assert np.log(P.R * abs(v)) == pytest.approx(sp, abs=1e-9)


def test_zero_bias_setpoint_infeasible():
    with pytest.raises(InfeasibleSetpoint):
        steady_state_gap(0.0, "current", S, 4.5, P, Vb=0.0)


def test_unknown_mode():
    with pytest.raises(ValueError):
        steady_state_gap(0.0, "height", S, 4.5, P)


def test_bias_factor_reduces_to_ohmic_at_reference_bias():
    for sigma in (0.2, 1e4, 3e4):
        assert bias_factor(sigma, -2.5, P) == pytest.approx(-2.5 * sigma, rel=1e-14)
    assert bias_factor(0.2, -4.0, JunctionParams(beta=0.0)) == pytest.approx(-0.8)


@given(st.floats(1.0, 1e5), st.floats(0.5, 10.0))
def test_conductance_exponent_is_log_derivative(sigma, V):
    h = 1e-6
    num = (np.log(abs(bias_factor(sigma, V * (1 + h), P))) - np.log(abs(bias_factor(sigma, V * (1 - h), P)))) \
        / (np.log1p(h) - np.log1p(-h))
    assert num == pytest.approx(conductance_exponent(sigma, P), rel=1e-6, abs=1e-6)
    assert sigma_from_exponent(conductance_exponent(sigma, P), P) == pytest.approx(sigma, rel=1e-12)


def test_params_validation():
    with pytest.raises(JunctionDomainError):
        JunctionParams(kappa0=0.0)
    with pytest.raises(JunctionDomainError):
        decay_constant(0.0)
    with pytest.raises(JunctionDomainError):
        bias_factor(-1.0, -2.5)
