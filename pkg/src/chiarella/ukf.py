"""Unscented Kalman filter for the cubic-demand model.

The value dynamics are linear, so the prediction step is the Kalman one. Only
the observation map ``p_{t-1} + f(x - p_{t-1}) + beta*u_t`` is pushed through
three sigma points. The gain is ``C/S`` (cross-covariance over innovation
variance), which reduces to the Kalman gain when ``kappa3 == 0``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit

from .kalman import (VAR_FLOOR, FilterOutput, SmoothOutput, VarianceFloorWarning, _as_inputs,
                     _smooth, as_segments, segment_priors)
from .model import ModelParams, ParameterError


@dataclass(frozen=True)
class UtConfig:
    """Unscented-transform tuning; ``lambda = a^2 (1 + k) - 1``."""

    a: float = 1.0
    k: float = 2.0
    b: float = 0.0

    def __post_init__(self) -> None:
        if self.a <= 0:
            raise ValueError("a must be positive")
        if 1.0 + self.lam <= 0:
            raise ValueError(f"1 + lambda must be positive, got {1.0 + self.lam}")

    @property
    def lam(self) -> float:
        return self.a * self.a * (1.0 + self.k) - 1.0


DEFAULT_UT = UtConfig()


def ut_weights(cfg: UtConfig = DEFAULT_UT) -> tuple[float, float, float, float]:
    """``(W0_m, W0_c, Wi_m, Wi_c)`` for the three-point scalar transform."""
    lam = cfg.lam
    w0m = lam / (lam + 1.0)
    wi = 1.0 / (2.0 * (lam + 1.0))
    return w0m, w0m + (1.0 - cfg.a ** 2 + cfg.b), wi, wi


def sigma_points(mean: float, var: float, cfg: UtConfig = DEFAULT_UT) -> np.ndarray:
    """``[mean, mean + sqrt((1+lambda) var), mean - sqrt((1+lambda) var)]``."""
    if not var > 0:
        raise ValueError("variance must be positive")
    d = math.sqrt((1.0 + cfg.lam) * var)
    return np.array([mean, mean + d, mean - d])


def unscented_transform(mean: float, var: float, fn: Callable[[np.ndarray], np.ndarray],
                        cfg: UtConfig = DEFAULT_UT) -> tuple[float, float]:
    """Approximate mean and variance of ``fn(X)`` for ``X ~ N(mean, var)``."""
    w0m, w0c, wim, wic = ut_weights(cfg)
    y = np.asarray(fn(sigma_points(mean, var, cfg)), dtype=float)
    wm = np.array([w0m, wim, wim])
    wc = np.array([w0c, wic, wic])
    mu = float(wm @ y)
    return mu, float(wc @ (y - mu) ** 2)


@njit(cache=True)
def _ukf_kernel(prices, u, kappa, kappa3, beta, g, sigma_N2, sigma_V2, v0, V0,
                c, w0m, w0c, wim, wic):
    T = prices.size - 1
    v_pred = np.empty(T)
    V_pred = np.empty(T)
    v_filt = np.empty(T)
    V_filt = np.empty(T)
    gain = np.empty(T)
    innov = np.empty(T)
    S_out = np.empty(T)
    ll = np.empty(T)
    p_hat = np.empty(T)
    clamps = 0
    vp = v0
    Vp = V0
    for t in range(T):
        if t > 0:
            vp = v_filt[t - 1] + g
            Vp = V_filt[t - 1] + sigma_V2
        d = c * math.sqrt(Vp)
        q = prices[t]
        base = q + beta * u[t]
        x0 = vp - q
        x1 = x0 + d
        x2 = x0 - d
        P0 = base + kappa * x0 + kappa3 * x0 * x0 * x0
        P1 = base + kappa * x1 + kappa3 * x1 * x1 * x1
        P2 = base + kappa * x2 + kappa3 * x2 * x2 * x2
        ph = w0m * P0 + wim * (P1 + P2)
        e0 = P0 - ph
        e1 = P1 - ph
        e2 = P2 - ph
        S = w0c * e0 * e0 + wic * (e1 * e1 + e2 * e2) + sigma_N2
        C = wic * (e1 * d - e2 * d)
        k = C / S
        e = prices[t + 1] - ph
        vf = vp + k * e
        Vf = Vp - k * k * S
        if Vf < 1e-14:
            Vf = 1e-14
            clamps += 1
        v_pred[t] = vp
        V_pred[t] = Vp
        v_filt[t] = vf
        V_filt[t] = Vf
        gain[t] = k
        innov[t] = e
        S_out[t] = S
        p_hat[t] = ph
        ll[t] = -0.5 * (1.8378770664093453 + math.log(S) + e * e / S)
    return v_pred, V_pred, v_filt, V_filt, gain, innov, S_out, ll, p_hat, clamps


def ukf_forward(prices, u, params: ModelParams, cfg: UtConfig = DEFAULT_UT,
                v0: float | None = None) -> FilterOutput:
    """Unscented filter over one contiguous segment; ``u=None`` derives the controls."""
    p, u = _as_inputs(prices, u, params)
    w0m, w0c, wim, wic = ut_weights(cfg)
    out = _ukf_kernel(p, u, params.kappa, params.kappa3, params.beta, params.g,
                      params.sigma_N ** 2, params.sigma_V ** 2,
                      params.v0 if v0 is None else v0, params.sigma0 ** 2,
                      math.sqrt(1.0 + cfg.lam), w0m, w0c, wim, wic)
    if out[-1]:
        warnings.warn(f"filtered variance clamped at {VAR_FLOOR:g} in {out[-1]} step(s)",
                      VarianceFloorWarning, stacklevel=2)
    return FilterOutput(*out[:-1])


def ukf_smooth(filt: FilterOutput, params: ModelParams) -> SmoothOutput:
    """RTS backward pass on the Gaussian approximation of the unscented filter.

    The lag-one recursion starts from ``(V_filt/V_pred)`` at ``T``, which equals
    ``1 - kappa*K_T`` in the linear case.
    """
    return _smooth(filt, filt.V_filt[-1] / filt.V_pred[-1])


def ukf_predictive_loglik(filt: FilterOutput) -> float:
    return float(np.sum(filt.loglik_terms))


def ukf_loglik(prices, params: ModelParams, cfg: UtConfig = DEFAULT_UT) -> float:
    """Predictive log-likelihood over one or more segments."""
    if params.sigma_N <= 0:
        raise ParameterError("filtering needs sigma_N > 0")
    segs = as_segments(prices)
    return sum(ukf_predictive_loglik(ukf_forward(s, None, params, cfg, v0=m))
               for s, m in zip(segs, segment_priors(segs, params)))
