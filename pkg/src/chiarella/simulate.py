"""Stochastic paths of the monthly model and noise-free integration of the continuous one.

Random numbers come from numpy's PCG64 (``numpy.random.default_rng``). For a
path of ``length`` states the generator first draws ``length - 1`` standard
normals for the price noise, then ``length - 1`` for the value noise. Batches
use the child stream ``default_rng([seed, path_index])``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .model import MarketState, ModelParams, bifurcation_margin

__all__ = ["SimPath", "Trajectory", "CycleReport", "simulate_path", "simulate_batch",
           "integrate_deterministic", "detect_limit_cycle", "TrajectoryTooShort"]


class TrajectoryTooShort(ValueError):
    pass


@dataclass
class SimPath:
    p: np.ndarray
    m: np.ndarray
    v: np.ndarray
    seed: int

    @property
    def delta(self) -> np.ndarray:
        return self.p - self.v

    def __len__(self) -> int:
        return self.p.size

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "p", "m", "v", "delta"])
            for t, (p, m, v, d) in enumerate(zip(self.p, self.m, self.v, self.delta)):
                w.writerow([t, repr(float(p)), repr(float(m)), repr(float(v)), repr(float(d))])

    @classmethod
    def from_csv(cls, path, seed: int = -1) -> "SimPath":
        data = np.genfromtxt(Path(path), delimiter=",", names=True, dtype=float)
        return cls(np.asarray(data["p"]), np.asarray(data["m"]), np.asarray(data["v"]), seed)


@njit(cache=True)
def _simulate_kernel(p0, v0, kappa, kappa3, beta, gamma, alpha, g, eps, eta):
    n = eps.size + 1
    p = np.empty(n)
    m = np.empty(n)
    v = np.empty(n)
    p[0] = p0
    m[0] = 0.0
    v[0] = v0
    for t in range(n - 1):
        x = v[t] - p[t]
        p[t + 1] = p[t] + kappa * x + kappa3 * x * x * x + beta * math.tanh(gamma * m[t]) + eps[t]
        m[t + 1] = (1.0 - alpha) * m[t] + alpha * (p[t + 1] - p[t])
        v[t + 1] = v[t] + g + eta[t]
    return p, m, v


def simulate_path(params: ModelParams, length: int, seed: int) -> SimPath:
    """Monthly path starting at ``p_0 = v_0``, ``m_0 = 0``."""
    if length < 2:
        raise ValueError("length must be >= 2")
    rng = np.random.default_rng(seed)
    return _simulate(params, length, rng, seed)


def simulate_batch(params: ModelParams, length: int, seed: int, n_paths: int) -> list[SimPath]:
    return [_simulate(params, length, np.random.default_rng([seed, i]), seed)
            for i in range(n_paths)]


def _simulate(params, length, rng, seed):
    eps = rng.standard_normal(length - 1) * params.sigma_N
    eta = rng.standard_normal(length - 1) * params.sigma_V
    p, m, v = _simulate_kernel(params.v0, params.v0, params.kappa, params.kappa3,
                               params.beta, params.gamma, params.alpha, params.g, eps, eta)
    return SimPath(p, m, v, int(seed))


@dataclass
class Trajectory:
    t: np.ndarray
    p: np.ndarray
    m: np.ndarray
    v: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return self.p - self.v

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])


@njit(cache=True)
def _rk4_kernel(p0, m0, v, kappa, kappa3, beta, gamma, alpha, dt, n):
    p = np.empty(n + 1)
    m = np.empty(n + 1)
    p[0] = p0
    m[0] = m0

    def rhs(pp, mm):
        x = v - pp
        dp = kappa * x + kappa3 * x * x * x + beta * math.tanh(gamma * mm)
        return dp, alpha * (dp - mm)

    for i in range(n):
        pi, mi = p[i], m[i]
        k1p, k1m = rhs(pi, mi)
        k2p, k2m = rhs(pi + 0.5 * dt * k1p, mi + 0.5 * dt * k1m)
        k3p, k3m = rhs(pi + 0.5 * dt * k2p, mi + 0.5 * dt * k2m)
        k4p, k4m = rhs(pi + dt * k3p, mi + dt * k3m)
        p[i + 1] = pi + dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        m[i + 1] = mi + dt / 6.0 * (k1m + 2.0 * k2m + 2.0 * k3m + k4m)
    return p, m


def integrate_deterministic(params: ModelParams, state0: MarketState, dt: float = 0.01,
                            horizon: float = 2000.0) -> Trajectory:
    """Classical RK4 on the noise-free continuous-time system.

    Noise and drift are dropped, so the value stays at ``state0.v``; the
    trend obeys ``dM = -alpha*M dt + alpha*dP``.
    """
    if dt <= 0 or horizon <= 0:
        raise ValueError("dt and horizon must be positive")
    n = int(round(horizon / dt))
    if n < 1:
        raise ValueError("horizon shorter than one step")
    p, m = _rk4_kernel(state0.p, state0.m, state0.v, params.kappa, params.kappa3,
                       params.beta, params.gamma, params.alpha, dt, n)
    t = np.arange(n + 1) * dt
    return Trajectory(t, p, m, np.full(n + 1, state0.v))


@dataclass
class CycleReport:
    converged_to_fixed_point: bool
    period: float | None
    amplitude_m: float
    amplitude_delta: float
    periods: np.ndarray

    @property
    def period_spread(self) -> float:
        """Largest relative deviation of single-cycle periods from their mean."""
        if self.periods.size == 0:
            return 0.0
        return float(np.max(np.abs(self.periods / self.periods.mean() - 1.0)))

    def to_dict(self) -> dict:
        return {"converged_to_fixed_point": self.converged_to_fixed_point,
                "period": self.period, "amplitude_m": self.amplitude_m,
                "amplitude_delta": self.amplitude_delta,
                "periods": [float(x) for x in self.periods]}


def detect_limit_cycle(traj: Trajectory, transient_fraction: float = 0.5,
                       tol_fp: float = 1e-6, min_periods: int = 10) -> CycleReport:
    if not 0 <= transient_fraction < 1:
        raise ValueError("transient_fraction must lie in [0, 1)")
    start = int(transient_fraction * traj.t.size)
    t, m, d = traj.t[start:], traj.m[start:], traj.delta[start:]
    if t.size < 3:
        raise TrajectoryTooShort("fewer than three samples after the transient")
    amp_m = float(np.max(np.abs(m)))
    amp_d = float(np.max(np.abs(d)))
    if amp_m < tol_fp:
        return CycleReport(True, None, amp_m, amp_d, np.empty(0))

    # upward zero crossings of m, linearly interpolated
    idx = np.nonzero((m[:-1] < 0) & (m[1:] >= 0))[0]
    frac = -m[idx] / (m[idx + 1] - m[idx])
    crossings = t[idx] + frac * (t[idx + 1] - t[idx])
    periods = np.diff(crossings)
    if periods.size < min_periods:
        raise TrajectoryTooShort(
            f"only {periods.size} full periods after the transient, need {min_periods}")
    return CycleReport(False, float(periods.mean()), amp_m, amp_d, periods)


def default_cycle_start(params: ModelParams, offset: float = 0.1) -> MarketState:
    """Perturbed start ``p = v0 + offset``, ``m = 0`` used for the deterministic figures."""
    return MarketState(params.v0 + offset, 0.0, params.v0)


def margin_regime(params: ModelParams) -> str:
    return "limit_cycle" if bifurcation_margin(params) < 0 else "relaxation"
