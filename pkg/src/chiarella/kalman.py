"""Scalar Kalman filter, RTS smoother and lag-one covariances for the linear model.

Observations are the returns ``r_t = p_t - p_{t-1}``, ``t = 1..T``, and the
hidden state ``x_t`` is the log value that drives ``r_t`` (the value at month
``t - 1``)::

    x_{t+1} = x_t + g + eta,            eta ~ N(0, sigma_V^2)
    r_t     = kappa*(x_t - p_{t-1}) + beta*u_t + eps,   eps ~ N(0, sigma_N^2)

with prior ``x_1 ~ N(v0, sigma0^2)`` and controls ``u_t = tanh(gamma*m_{t-1})``.
Every output series is indexed ``t = 1..T`` (array position ``t - 1``).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, fields

import numpy as np
from numba import njit

from .model import ModelParams, ParameterError, control_terms

LOG_2PI = math.log(2.0 * math.pi)
VAR_FLOOR = 1e-14


class VarianceFloorWarning(RuntimeWarning):
    """A filtered variance was clamped at the floor."""


@dataclass
class FilterOutput:
    v_pred: np.ndarray
    V_pred: np.ndarray
    v_filt: np.ndarray
    V_filt: np.ndarray
    gain: np.ndarray
    innovation: np.ndarray
    innovation_var: np.ndarray
    loglik_terms: np.ndarray
    price_pred: np.ndarray

    def __len__(self) -> int:
        return self.v_pred.size

    def to_csv(self, path) -> None:
        _write_columns(path, {f.name: getattr(self, f.name) for f in fields(self)})


@dataclass
class SmoothOutput:
    v_smooth: np.ndarray
    V_smooth: np.ndarray
    lag1_cov: np.ndarray   # Cov(x_t, x_{t+1} | all), t = 1..T-1
    J: np.ndarray          # smoother gains, J_T = 0

    def to_csv(self, path) -> None:
        cols = {f.name: getattr(self, f.name) for f in fields(self)}
        cols["lag1_cov"] = np.append(self.lag1_cov, np.nan)
        _write_columns(path, cols)


def _write_columns(path, cols: dict) -> None:
    names = list(cols)
    n = len(next(iter(cols.values())))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + names)
        for i in range(n):
            w.writerow([i + 1] + [repr(float(cols[k][i])) for k in names])


@njit(cache=True)
def _kf_kernel(prices, u, kappa, beta, g, sigma_N2, sigma_V2, v0, V0):
    T = prices.size - 1
    v_pred = np.empty(T)
    V_pred = np.empty(T)
    v_filt = np.empty(T)
    V_filt = np.empty(T)
    gain = np.empty(T)
    innov = np.empty(T)
    S = np.empty(T)
    ll = np.empty(T)
    p_hat = np.empty(T)
    clamps = 0
    vp = v0
    Vp = V0
    for t in range(T):
        if t > 0:
            vp = v_filt[t - 1] + g
            Vp = V_filt[t - 1] + sigma_V2
        s = kappa * kappa * Vp + sigma_N2
        k = kappa * Vp / s
        ph = prices[t] + kappa * (vp - prices[t]) + beta * u[t]
        e = prices[t + 1] - ph
        vf = vp + k * e
        Vf = Vp - kappa * k * Vp
        if Vf < 1e-14:
            Vf = 1e-14
            clamps += 1
        v_pred[t] = vp
        V_pred[t] = Vp
        v_filt[t] = vf
        V_filt[t] = Vf
        gain[t] = k
        innov[t] = e
        S[t] = s
        p_hat[t] = ph
        ll[t] = -0.5 * (1.8378770664093453 + math.log(s) + e * e / s)
    return v_pred, V_pred, v_filt, V_filt, gain, innov, S, ll, p_hat, clamps


def _as_inputs(prices, u, params: ModelParams):
    p = np.ascontiguousarray(prices, dtype=float)
    if p.ndim != 1 or p.size < 3:
        raise ValueError("need a price series of length >= 3")
    if u is None:
        u = control_terms(p, params)
    u = np.ascontiguousarray(u, dtype=float)
    if u.size != p.size - 1:
        raise ValueError(f"control series has length {u.size}, expected {p.size - 1}")
    if params.sigma_N <= 0:
        raise ParameterError("filtering needs sigma_N > 0")
    return p, u


def kf_forward(prices, u, params: ModelParams, v0: float | None = None) -> FilterOutput:
    """Forward Kalman recursions over one contiguous price segment.

    ``u`` may be ``None`` to derive the controls from ``prices``; ``v0``
    overrides the prior mean (segment re-priming).
    """
    if not params.is_linear:
        raise ParameterError("kf_forward needs kappa3 == 0; use ukf_forward")
    p, u = _as_inputs(prices, u, params)
    out = _kf_kernel(p, u, params.kappa, params.beta, params.g, params.sigma_N ** 2,
                     params.sigma_V ** 2, params.v0 if v0 is None else v0, params.sigma0 ** 2)
    if out[-1]:
        warnings.warn(f"filtered variance clamped at {VAR_FLOOR:g} in {out[-1]} step(s)",
                      VarianceFloorWarning, stacklevel=2)
    return FilterOutput(*out[:-1])


@njit(cache=True)
def _rts_kernel(v_pred, V_pred, v_filt, V_filt):
    T = v_filt.size
    vs = np.empty(T)
    Vs = np.empty(T)
    J = np.zeros(T)
    vs[T - 1] = v_filt[T - 1]
    Vs[T - 1] = V_filt[T - 1]
    for t in range(T - 2, -1, -1):
        j = V_filt[t] / V_pred[t + 1]
        J[t] = j
        vs[t] = v_filt[t] + j * (vs[t + 1] - v_pred[t + 1])
        Vs[t] = V_filt[t] + j * j * (Vs[t + 1] - V_pred[t + 1])
    return vs, Vs, J


@njit(cache=True)
def _lag1_kernel(V_filt, J, c_last):
    T = V_filt.size
    C = np.empty(T - 1)
    C[T - 2] = c_last
    # C_{t-2,t-1} = V_{t-1}^{t-1} J_{t-2} + J_{t-1} (C_{t-1,t} - V_{t-1}^{t-1}) J_{t-2}
    for i in range(T - 3, -1, -1):
        C[i] = V_filt[i + 1] * J[i] + J[i + 1] * (C[i + 1] - V_filt[i + 1]) * J[i]
    return C


def _smooth(filt: FilterOutput, c_last_factor: float) -> SmoothOutput:
    vs, Vs, J = _rts_kernel(filt.v_pred, filt.V_pred, filt.v_filt, filt.V_filt)
    if len(filt) > 1:
        C = _lag1_kernel(filt.V_filt, J, c_last_factor * filt.V_filt[-2])
    else:
        C = np.empty(0)
    return SmoothOutput(vs, Vs, C, J)


def rts_smooth(filt: FilterOutput, params: ModelParams) -> SmoothOutput:
    """Rauch-Tung-Striebel backward pass; also fills the lag-one covariances."""
    return _smooth(filt, 1.0 - params.kappa * filt.gain[-1])


def lag_one_cov(filt: FilterOutput, smooth: SmoothOutput, params: ModelParams) -> np.ndarray:
    """Posterior ``Cov(x_t, x_{t+1})`` for ``t = 1..T-1``.

    Starts from ``(1 - kappa*K_T) * V_{T-1}^{T-1}`` and runs backwards.
    """
    if len(filt) < 2:
        return np.empty(0)
    return _lag1_kernel(filt.V_filt, smooth.J,
                        (1.0 - params.kappa * filt.gain[-1]) * filt.V_filt[-2])


def kf_predictive_loglik(filt: FilterOutput) -> float:
    """Sum of Gaussian log densities of the one-step-ahead return forecasts."""
    return float(np.sum(filt.loglik_terms))


def segment_priors(segments, params: ModelParams) -> list[float]:
    """Prior means per segment: ``v0`` for the first, its first log price afterwards."""
    return [params.v0 if i == 0 else float(seg[0]) for i, seg in enumerate(segments)]


def as_segments(prices) -> list[np.ndarray]:
    """Normalise a price array or a list of segment arrays to a list of arrays."""
    if isinstance(prices, (list, tuple)) and prices and np.ndim(prices[0]) == 1:
        return [np.asarray(s, dtype=float) for s in prices]
    return [np.asarray(prices, dtype=float)]


def loglik(prices, params: ModelParams) -> float:
    """Predictive log-likelihood of the linear model over one or more segments."""
    segs = as_segments(prices)
    return sum(kf_predictive_loglik(kf_forward(s, None, params, v0=m))
               for s, m in zip(segs, segment_priors(segs, params)))
