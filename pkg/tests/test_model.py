import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chiarella.model import (FIG2, US_LINEAR, US_NONLINEAR, MarketState, ModelParams,
                             ParameterError, bifurcation_margin, control_terms, damping,
                             fundamentalist_demand, gamma_from_trend, step_discrete,
                             trend_demand, trend_signal)

finite = st.floats(-5, 5, allow_nan=False)


def test_fundamentalist_demand_values():
    assert fundamentalist_demand(0.0, US_NONLINEAR) == 0.0
    assert fundamentalist_demand(0.5, ModelParams(kappa=0.015)) == pytest.approx(0.0075, abs=1e-15)
    nl = ModelParams(kappa=-0.011, kappa3=0.269)
    assert fundamentalist_demand(1.0, nl) == pytest.approx(0.258, abs=1e-12)


def test_trend_demand_values():
    assert trend_demand(0.0, US_LINEAR) == 0.0
    assert trend_demand(1.0, ModelParams(beta=0.1, gamma=50)) == pytest.approx(0.1, abs=1e-10)
    assert trend_demand(0.01, ModelParams(beta=0.015, gamma=36.7)) == pytest.approx(
        0.015 * math.tanh(0.367), rel=1e-14)
    assert trend_demand(0.01, ModelParams(beta=0.015, gamma=36.7)) == pytest.approx(0.0052705, abs=1e-7)


def test_trend_demand_shape_on_random_points():
    rng = np.random.default_rng(0)
    m = np.sort(rng.normal(0, 0.2, 1000))
    d = trend_demand(m, US_LINEAR)
    assert np.all(np.abs(d) <= US_LINEAR.beta)
    np.testing.assert_array_equal(trend_demand(-m, US_LINEAR), -d)
    assert np.all(np.diff(d) >= 0)


@given(x=finite, k=st.floats(0, 2), k3=st.floats(0, 2))
def test_fundamentalist_demand_odd_and_monotone(x, k, k3):
    p = ModelParams(kappa=k, kappa3=k3)
    assert fundamentalist_demand(-x, p) == -fundamentalist_demand(x, p)
    assert fundamentalist_demand(x + 0.1, p) >= fundamentalist_demand(x, p)


def test_damping_values():
    p = ModelParams(alpha=1 / 7, kappa=0.08, gamma=50, beta=0.1)
    assert damping(0.0, p) == pytest.approx(-0.491, abs=1e-3)
    assert damping(0.0, p.replace(kappa=0.8)) == pytest.approx(0.229, abs=1e-3)
    assert damping(1e3, p) == pytest.approx(1 / 7 + 0.08, abs=1e-12)
    with pytest.raises(ParameterError):
        damping(0.0, US_NONLINEAR)


@given(x=st.floats(-1, 1))
def test_damping_minimised_at_zero(x):
    assert damping(x, FIG2) >= damping(0.0, FIG2)


def test_bifurcation_margin():
    assert bifurcation_margin(ModelParams(alpha=1 / 7, kappa=0.08, gamma=50, beta=0.1)) == \
        pytest.approx(-0.4914, abs=1e-4)
    assert bifurcation_margin(US_LINEAR) == pytest.approx(0.0793, abs=1e-3)
    assert bifurcation_margin(ModelParams(beta=0.0, kappa=0.01)) > 0
    assert bifurcation_margin(FIG2) == damping(0.0, FIG2)


def test_step_fixed_point():
    p = ModelParams(g=0.0)
    s = MarketState(4.0, 0.0, 4.0)
    assert step_discrete(s, p) == s
    assert step_discrete(step_discrete(s, p), p) == s


def test_step_full_pull_to_value():
    p = ModelParams(kappa=1.0, beta=0.0, g=0.0)
    assert step_discrete(MarketState(0.0, 0.0, 1.0), p).p == 1.0


def test_step_us_row():
    s = step_discrete(MarketState(4.0, 0.01, 4.42), US_LINEAR)
    assert s.p == pytest.approx(4.0 + 0.015 * 0.42 + 0.015 * math.tanh(0.367), abs=1e-12)
    assert s.p == pytest.approx(4.0115705, abs=1e-7)
    assert s.m == pytest.approx((6 / 7) * 0.01 + (1 / 7) * (s.p - 4.0), abs=1e-15)
    assert s.v == pytest.approx(4.42 + 0.0011)


def test_params_validation():
    with pytest.raises(ParameterError):
        ModelParams(beta=-0.1)
    with pytest.raises(ParameterError):
        ModelParams(alpha=0.0)
    with pytest.raises(ParameterError):
        ModelParams(kappa=float("nan"))
    with pytest.raises(ParameterError):
        ModelParams.from_dict({"kapa": 1.0})
    assert ModelParams.from_dict(US_LINEAR.to_dict()) == US_LINEAR
    assert US_LINEAR.is_linear and not US_NONLINEAR.is_linear


def test_trend_signal_hand_series():
    m = trend_signal([0.0, 0.07, 0.07], 1 / 7)
    np.testing.assert_allclose(m, [0.0, 0.01, (6 / 7) * 0.01], atol=1e-15)
    assert np.all(trend_signal(np.full(10, 3.0), 1 / 7) == 0)
    m = trend_signal(0.02 * np.arange(400), 1 / 7)
    assert m[-1] == pytest.approx(0.02, rel=1e-12)


@given(c=st.floats(-100, 100))
@settings(max_examples=25)
def test_trend_signal_shift_invariant(c):
    p = np.random.default_rng(1).normal(0, 0.05, 50).cumsum()
    np.testing.assert_allclose(trend_signal(p + c, 0.2), trend_signal(p, 0.2), atol=1e-9)


def test_control_terms_alignment():
    p = np.array([0.0, 0.07, 0.07, 0.1])
    u = control_terms(p, ModelParams(gamma=10.0))
    m = trend_signal(p, 1 / 7)
    assert u.size == 3 and u[0] == 0.0
    np.testing.assert_allclose(u, np.tanh(10.0 * m[:-1]))


def test_gamma_rule_on_known_dispersion():
    # white-noise returns: std(m) = sigma * sqrt(alpha / (2 - alpha)) in the stationary limit
    rng = np.random.default_rng(3)
    alpha, sigma = 1 / 7, 0.04
    p = np.concatenate([[0.0], rng.normal(0, sigma, 200_000).cumsum()])
    expected = 1.0 / (2 * sigma * math.sqrt(alpha / (2 - alpha)))
    assert gamma_from_trend(p, alpha) == pytest.approx(expected, rel=0.02)
