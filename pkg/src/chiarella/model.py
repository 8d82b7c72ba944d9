"""Parameters, demand functions and one-month dynamics of the extended Chiarella model.

Prices and values are natural logarithms throughout; the mispricing handed to
the fundamentalists is ``x = v - p``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Any

import numpy as np
from scipy.signal import lfilter

PARAM_NAMES = ("kappa", "kappa3", "beta", "gamma", "alpha",
               "sigma_N", "sigma_V", "g", "v0", "sigma0")


class ParameterError(ValueError):
    """Raised for inadmissible model parameters."""


@dataclass(frozen=True)
class ModelParams:
    """Full parameter vector; all rates are per month.

    ``kappa3 == 0`` selects the linear model, anything else the cubic one.
    """

    kappa: float = 0.015
    kappa3: float = 0.0
    beta: float = 0.015
    gamma: float = 36.7
    alpha: float = 1.0 / 7.0
    sigma_N: float = 0.043
    sigma_V: float = 0.018
    g: float = 0.0011
    v0: float = 4.42
    sigma0: float = 0.1

    def __post_init__(self) -> None:
        for f in fields(self):
            val = getattr(self, f.name)
            if not isinstance(val, (int, float, np.floating, np.integer)) or not math.isfinite(val):
                raise ParameterError(f"{f.name} must be a finite real, got {val!r}")
            object.__setattr__(self, f.name, float(val))
        if self.beta < 0:
            raise ParameterError(f"beta must be >= 0, got {self.beta}")
        for name in ("gamma", "sigma0"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be > 0, got {getattr(self, name)}")
        # zero noise is allowed for deterministic runs; the filters demand sigma_N > 0
        for name in ("sigma_N", "sigma_V"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 < self.alpha <= 1:
            raise ParameterError(f"alpha must lie in (0, 1], got {self.alpha}")

    @property
    def is_linear(self) -> bool:
        return self.kappa3 == 0.0

    def replace(self, **changes: Any) -> "ModelParams":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelParams":
        unknown = set(d) - set(PARAM_NAMES)
        if unknown:
            raise ParameterError(f"unknown parameter(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class MarketState:
    p: float
    m: float
    v: float


# Presets: US stock index calibrations (linear and cubic), a limit-cycle regime
# (FIG2) and a bimodal-distortion regime (FIG12).
US_LINEAR = ModelParams(kappa=0.015, beta=0.015, gamma=36.7, sigma_N=0.043,
                        sigma_V=0.018, g=0.0011, v0=4.42)
US_NONLINEAR = ModelParams(kappa=-0.011, kappa3=0.269, beta=0.018, gamma=36.7,
                           sigma_N=0.042, sigma_V=0.018, g=0.0011, v0=4.41)
FIG2 = ModelParams(kappa=0.08, beta=0.1, gamma=50.0, sigma_N=0.15,
                   sigma_V=0.075, g=0.0, v0=5.0)
FIG12 = ModelParams(kappa=0.0, kappa3=0.4, beta=0.03, gamma=50.0, sigma_N=0.04,
                    sigma_V=0.02, g=0.001, v0=5.0)

PRESETS = {"us_linear": US_LINEAR, "us_nonlinear": US_NONLINEAR,
           "fig2": FIG2, "fig12": FIG12}


def fundamentalist_demand(x, params: ModelParams):
    """Value-investor demand ``kappa*x + kappa3*x**3`` for mispricing ``x = v - p``."""
    return params.kappa * x + params.kappa3 * x ** 3


def trend_demand(m, params: ModelParams):
    """Bounded trend-follower demand ``beta*tanh(gamma*m)``."""
    return params.beta * np.tanh(params.gamma * m)


def damping(x, params: ModelParams):
    """Damping force of the deterministic trend oscillator.

    Only defined for the linear model; the cubic demand does not reduce to a
    Lienard equation in the trend alone.
    """
    if not params.is_linear:
        raise ParameterError("damping() is defined for the linear model only (kappa3 == 0)")
    a, k, b, gam = params.alpha, params.kappa, params.beta, params.gamma
    return a + k - a * gam * b * (1.0 - np.tanh(gam * x) ** 2)


def bifurcation_margin(params: ModelParams) -> float:
    """``alpha + kappa - alpha*gamma*beta``; negative means a limit cycle."""
    return params.alpha + params.kappa - params.alpha * params.gamma * params.beta


def step_discrete(state: MarketState, params: ModelParams, eps: float = 0.0,
                  eta: float = 0.0) -> MarketState:
    """Advance one month.

    The trend update uses the return realised in this step, so ``m`` at time
    ``t`` already contains ``p_t - p_{t-1}`` and drives the return of ``t+1``.
    """
    p_new = (state.p + fundamentalist_demand(state.v - state.p, params)
             + params.beta * math.tanh(params.gamma * state.m) + eps)
    m_new = (1.0 - params.alpha) * state.m + params.alpha * (p_new - state.p)
    v_new = state.v + params.g + eta
    return MarketState(p_new, m_new, v_new)


def trend_signal(prices, alpha: float) -> np.ndarray:
    """EWMA of one-month log returns, ``m_0 = 0``.

    ``m[t] = (1 - alpha) * m[t-1] + alpha * (p[t] - p[t-1])``; the result has
    the same length as ``prices``.
    """
    p = np.asarray(prices, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("need at least two prices")
    m = np.zeros_like(p)
    m[1:] = lfilter([alpha], [1.0, alpha - 1.0], np.diff(p))
    return m


def control_terms(prices, params: ModelParams) -> np.ndarray:
    """Trend controls ``u_t = tanh(gamma * m_{t-1})`` for the returns ``t = 1..T``."""
    m = trend_signal(prices, params.alpha)
    return np.tanh(params.gamma * m[:-1])


def gamma_from_trend(prices, alpha: float, factor: float = 2.0) -> float:
    """Saturation scale fixed by ``1/gamma = factor * std(m)``."""
    m = trend_signal(prices, alpha)
    sd = float(np.std(m[1:]))
    if sd <= 0:
        raise ParameterError("trend signal has zero dispersion; cannot fix gamma")
    return 1.0 / (factor * sd)
