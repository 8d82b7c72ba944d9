import numpy as np
import pytest
from scipy.integrate import solve_ivp

from chiarella.model import FIG2, US_LINEAR, MarketState, ModelParams, bifurcation_margin
from chiarella.simulate import (SimPath, TrajectoryTooShort, default_cycle_start,
                                detect_limit_cycle, integrate_deterministic, simulate_batch,
                                simulate_path)


def test_zero_noise_path_is_constant():
    p = ModelParams(sigma_N=0.0, sigma_V=0.0, g=0.0, v0=5.0)
    s = simulate_path(p, 200, seed=1)
    assert np.all(s.p == 5.0) and np.all(s.v == 5.0) and np.all(s.m == 0.0)


def test_simulation_is_bitwise_reproducible():
    a = simulate_path(US_LINEAR, 5000, seed=42)
    b = simulate_path(US_LINEAR, 5000, seed=42)
    c = simulate_path(US_LINEAR, 5000, seed=43)
    assert a.p.tobytes() == b.p.tobytes() and a.v.tobytes() == b.v.tobytes()
    assert a.p.tobytes() != c.p.tobytes()
    batch = simulate_batch(US_LINEAR, 100, seed=42, n_paths=3)
    assert len({x.p.tobytes() for x in batch}) == 3
    assert batch[1].p.tobytes() == simulate_batch(US_LINEAR, 100, 42, 2)[1].p.tobytes()


def test_simulation_matches_documented_rng_protocol():
    n = 50
    rng = np.random.default_rng(7)
    eps = rng.standard_normal(n - 1) * US_LINEAR.sigma_N
    eta = rng.standard_normal(n - 1) * US_LINEAR.sigma_V
    s = simulate_path(US_LINEAR, n, seed=7)
    np.testing.assert_allclose(np.diff(s.v), US_LINEAR.g + eta, atol=1e-13)
    x = s.v[:-1] - s.p[:-1]
    expect = US_LINEAR.kappa * x + US_LINEAR.beta * np.tanh(US_LINEAR.gamma * s.m[:-1]) + eps
    np.testing.assert_allclose(np.diff(s.p), expect, atol=1e-13)


def test_simpath_csv_roundtrip(tmp_path):
    s = simulate_path(US_LINEAR, 20, seed=3)
    s.to_csv(tmp_path / "p.csv")
    header = (tmp_path / "p.csv").read_text().splitlines()[0]
    assert header == "t,p,m,v,delta"
    back = SimPath.from_csv(tmp_path / "p.csv")
    assert back.p.tobytes() == s.p.tobytes()


def test_deterministic_equilibrium_stays_put():
    tr = integrate_deterministic(FIG2, MarketState(5.0, 0.0, 5.0), 0.01, 100.0)
    assert np.all(tr.p == 5.0) and np.all(tr.m == 0.0)
    rep = detect_limit_cycle(tr)
    assert rep.converged_to_fixed_point


def test_rk4_agrees_with_adaptive_reference():
    p = FIG2
    a, k, b, gam, v = p.alpha, p.kappa, p.beta, p.gamma, p.v0

    def rhs(t, y):
        dp = k * (v - y[0]) + b * np.tanh(gam * y[1])
        return [dp, a * (dp - y[1])]

    ref = solve_ivp(rhs, (0, 60), [5.1, 0.0], rtol=1e-11, atol=1e-13)
    tr = integrate_deterministic(p, MarketState(5.1, 0.0, 5.0), 0.01, 60.0)
    assert tr.p[-1] == pytest.approx(ref.y[0, -1], abs=1e-8)
    assert tr.m[-1] == pytest.approx(ref.y[1, -1], abs=1e-8)


def test_rk4_fourth_order():
    s0 = default_cycle_start(FIG2)
    finals = [integrate_deterministic(FIG2, s0, dt, 40.0) for dt in (0.4, 0.2, 0.1)]
    e1 = abs(finals[0].p[-1] - finals[1].p[-1])
    e2 = abs(finals[1].p[-1] - finals[2].p[-1])
    assert 16 * 0.5 <= e1 / e2 <= 16 * 1.5


def test_limit_cycle_at_fig2_parameters():
    assert bifurcation_margin(FIG2) < 0
    rep = detect_limit_cycle(integrate_deterministic(FIG2, default_cycle_start(FIG2), 0.01, 3000.0))
    assert not rep.converged_to_fixed_point
    assert rep.period_spread < 0.02
    assert rep.amplitude_delta > 0 and rep.amplitude_m > 0


def test_limit_cycle_unique_across_starts():
    reps = [detect_limit_cycle(integrate_deterministic(FIG2, MarketState(5.0 + d, m, 5.0), 0.01, 3000.0))
            for d, m in [(0.1, 0.0), (-0.8, 0.05)]]
    assert reps[0].amplitude_delta == pytest.approx(reps[1].amplitude_delta, rel=0.05)
    assert reps[0].amplitude_m == pytest.approx(reps[1].amplitude_m, rel=0.05)
    assert reps[0].period == pytest.approx(reps[1].period, rel=0.05)


def test_relaxation_when_margin_positive():
    p = FIG2.replace(kappa=0.8)
    assert bifurcation_margin(p) > 0
    tr = integrate_deterministic(p, default_cycle_start(p), 0.01, 1000.0)
    assert detect_limit_cycle(tr).converged_to_fixed_point
    # the linearisation is an underdamped spiral: successive peaks of |delta| shrink
    d = np.abs(tr.delta)
    peaks = d[1:-1][(d[1:-1] > d[:-2]) & (d[1:-1] >= d[2:])]
    peaks = peaks[peaks > 1e-12]
    assert peaks.size >= 3 and np.all(np.diff(peaks) < 0)
    assert d[-1] < 1e-10


def test_detect_rejects_short_trajectories():
    tr = integrate_deterministic(FIG2, default_cycle_start(FIG2), 0.01, 150.0)
    with pytest.raises(TrajectoryTooShort):
        detect_limit_cycle(tr)
    with pytest.raises(ValueError):
        integrate_deterministic(FIG2, default_cycle_start(FIG2), 0.0, 10.0)
