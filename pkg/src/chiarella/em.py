"""EM calibration of the linear model.

The E-step is the Kalman filter plus RTS smoother; the M-step maximises the
expected complete-data log-likelihood in closed form. Three blocks separate
exactly:

* observation block ``(kappa, beta, sigma_N)``: a least-squares problem in the
  expected mispricing ``z_t = x_t - p_{t-1}`` and the control ``u_t``;
* value block ``(g, sigma_V)``: drift and variance of the smoothed increments;
* prior block ``(v0, sigma0)``: moments of the first hidden state.

Multiple contiguous segments (exclusion windows) share every parameter; later
segments are re-primed at their first log price so only segment 0 informs
``v0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .kalman import as_segments, kf_forward, lag_one_cov, rts_smooth, segment_priors
from .model import ModelParams, ParameterError, control_terms

MONOTONE_SLACK = 1e-8
SIGMA0_FLOOR = 1e-8
SIGMA_V_FLOOR = 1e-8
VOLATILITIES = ("sigma_N", "sigma_V", "sigma0")
TSTAT_NAMES = ("kappa", "beta", "sigma_N", "sigma_V", "g", "v0")


class EstimationError(RuntimeError):
    """Calibration left the admissible region or broke a guaranteed invariant."""


@dataclass
class SufficientStats:
    """Posterior moments of the hidden values for one segment."""

    E_v: np.ndarray    # E[x_t]
    E_v2: np.ndarray   # E[x_t^2]
    E_vv: np.ndarray   # E[x_t x_{t+1}], length T-1
    loglik: float = float("nan")
    V: np.ndarray | None = None   # smoothed variances
    C: np.ndarray | None = None   # lag-one covariances

    def __post_init__(self) -> None:
        # central moments avoid cancellation in E[x^2] - E[x]^2 when variances are tiny
        if self.V is None:
            self.V = self.E_v2 - self.E_v ** 2
        if self.C is None:
            self.C = self.E_vv - self.E_v[:-1] * self.E_v[1:]


@dataclass
class CalibrationResult:
    params: ModelParams
    loglik: float
    loglik_trace: list[float]
    iterations: int
    converged: bool
    tstats: dict[str, float | None] = field(default_factory=dict)
    model: str = "linear"
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "params": self.params.to_dict(),
            "loglik": self.loglik,
            "loglik_trace": list(self.loglik_trace),
            "iterations": self.iterations,
            "converged": self.converged,
            "tstats": dict(self.tstats),
            "diagnostics": list(self.diagnostics),
        }

    def to_json(self, path=None, **kw) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, **kw)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        return cls(ModelParams.from_dict(d["params"]), d["loglik"], list(d["loglik_trace"]),
                   d["iterations"], d["converged"], dict(d.get("tstats", {})),
                   d.get("model", "linear"), list(d.get("diagnostics", [])))


def e_step(prices, u, params: ModelParams, v0: float | None = None) -> SufficientStats:
    """Smoothed first and second moments of the hidden values."""
    filt = kf_forward(prices, u, params, v0=v0)
    sm = rts_smooth(filt, params)
    C = lag_one_cov(filt, sm, params)
    Ev = sm.v_smooth
    return SufficientStats(Ev, sm.V_smooth + Ev * Ev, C + Ev[:-1] * Ev[1:],
                           float(np.sum(filt.loglik_terms)), sm.V_smooth, C)


def _segment_inputs(prices, u, params):
    segs = as_segments(prices)
    if u is None:
        us = [control_terms(s, params) for s in segs]
    else:
        us = as_segments(u) if len(segs) > 1 else [np.asarray(u, dtype=float)]
    return segs, us


def _obs_moments(stats: SufficientStats, p: np.ndarray, u: np.ndarray):
    """Moments of the observation regression ``r = kappa*z + beta*u``."""
    r = np.diff(p)
    q = p[:-1]
    Ez = stats.E_v - q
    Ez2 = stats.V + Ez * Ez
    return np.array([Ez2.sum(), (u * Ez).sum(), (u * u).sum(),
                     (r * Ez).sum(), (r * u).sum(), (r * r).sum()])


def m_step(stats: SufficientStats | Sequence[SufficientStats], prices, u,
           prior_params: ModelParams, update_sigma0: bool = False) -> ModelParams:
    """Closed-form maximiser of the expected complete-data log-likelihood.

    ``alpha`` and ``gamma`` are carried over unchanged. When ``sum(u^2) == 0``
    the trend column is absent and ``beta`` is set to 0; when the unconstrained
    ``beta`` is negative the maximiser on the boundary ``beta = 0`` is used.
    """
    segs, us = _segment_inputs(prices, u, prior_params)
    stats_l = [stats] if isinstance(stats, SufficientStats) else list(stats)
    if len(stats_l) != len(segs):
        raise ValueError("one SufficientStats per segment required")

    S = sum(_obs_moments(st, p, uu) for st, p, uu in zip(stats_l, segs, us))
    Szz, Suz, Suu, Srz, Sru, Srr = S
    n_obs = sum(p.size - 1 for p in segs)
    if Suu == 0.0:
        if Szz <= 0:
            raise EstimationError("singular M-step: no variation in mispricing or trend")
        kappa, beta = Srz / Szz, 0.0
    else:
        A = np.array([[Szz, Suz], [Suz, Suu]])
        if np.linalg.cond(A) > 1e14:
            raise EstimationError("singular M-step: mispricing and trend regressors are collinear")
        kappa, beta = np.linalg.solve(A, [Srz, Sru])
        if beta < 0:
            kappa, beta = Srz / Szz, 0.0
    ssr = Srr + kappa ** 2 * Szz + beta ** 2 * Suu - 2 * kappa * Srz - 2 * beta * Sru \
        + 2 * kappa * beta * Suz
    sigma_N2 = ssr / n_obs

    n_trans = sum(st.E_v.size - 1 for st in stats_l)
    if n_trans == 0:
        raise EstimationError("need at least two returns per series to update the value block")
    g = sum(st.E_v[-1] - st.E_v[0] for st in stats_l) / n_trans
    sq = sum(float(np.sum(st.V[1:] + st.V[:-1] - 2 * st.C + (np.diff(st.E_v) - g) ** 2))
             for st in stats_l)
    # the value-noise MLE can sit on the boundary; hold it at a tiny floor there
    sigma_V2 = max(sq / n_trans, SIGMA_V_FLOOR ** 2)

    v0 = float(stats_l[0].E_v[0])
    if update_sigma0:
        anchors = segment_priors(segs, prior_params.replace(v0=v0))
        s0 = [st.V[0] + (st.E_v[0] - a) ** 2 for st, a in zip(stats_l, anchors)]
        sigma0 = math.sqrt(max(float(np.mean(s0)), SIGMA0_FLOOR ** 2))
    else:
        sigma0 = prior_params.sigma0

    for name, val in (("kappa", kappa), ("sigma_N^2", sigma_N2), ("sigma_V^2", sigma_V2), ("g", g)):
        if not math.isfinite(val):
            raise EstimationError(f"M-step produced non-finite {name}")
    if sigma_N2 <= 0 or sigma_V2 <= 0:
        raise EstimationError(f"M-step produced non-positive variance "
                              f"(sigma_N^2={sigma_N2:g}, sigma_V^2={sigma_V2:g})")
    return prior_params.replace(kappa=float(kappa), beta=float(beta),
                                sigma_N=math.sqrt(sigma_N2), sigma_V=math.sqrt(sigma_V2),
                                g=float(g), v0=v0, sigma0=sigma0)


def expected_complete_loglik(stats: SufficientStats | Sequence[SufficientStats], prices, u,
                             params: ModelParams) -> float:
    """Expected complete-data log-likelihood under fixed posterior moments."""
    segs, us = _segment_inputs(prices, u, params)
    stats_l = [stats] if isinstance(stats, SufficientStats) else list(stats)
    k, b, g = params.kappa, params.beta, params.g
    sN2, sV2, s02 = params.sigma_N ** 2, params.sigma_V ** 2, params.sigma0 ** 2
    total = 0.0
    for st, p, uu, a in zip(stats_l, segs, us, segment_priors(segs, params)):
        Szz, Suz, Suu, Srz, Sru, Srr = _obs_moments(st, p, uu)
        n = p.size - 1
        ssr = Srr + k * k * Szz + b * b * Suu - 2 * k * Srz - 2 * b * Sru + 2 * k * b * Suz
        total += -0.5 * n * math.log(2 * math.pi * sN2) - 0.5 * ssr / sN2
        Ev = st.E_v
        sq = np.sum(st.V[1:] + st.V[:-1] - 2 * st.C + (np.diff(Ev) - g) ** 2)
        total += -0.5 * (n - 1) * math.log(2 * math.pi * sV2) - 0.5 * sq / sV2
        total += -0.5 * math.log(2 * math.pi * s02) - 0.5 * (st.V[0] + (Ev[0] - a) ** 2) / s02
    return float(total)


def _e_all(segs, us, params):
    priors = segment_priors(segs, params)
    return [e_step(p, uu, params, v0=m) for p, uu, m in zip(segs, us, priors)]


_LOG_FIELDS = ("sigma_N", "sigma_V", "sigma0")
_PACK_FIELDS = ("kappa", "beta", "sigma_N", "sigma_V", "g", "v0", "sigma0")


def _pack(p: ModelParams) -> np.ndarray:
    return np.array([math.log(getattr(p, n)) if n in _LOG_FIELDS else getattr(p, n)
                     for n in _PACK_FIELDS])


def _unpack(x: np.ndarray, template: ModelParams) -> ModelParams:
    vals = {n: (math.exp(v) if n in _LOG_FIELDS else float(v)) for n, v in zip(_PACK_FIELDS, x)}
    vals["beta"] = max(vals["beta"], 0.0)
    return template.replace(**vals)


def em_fit(prices, params0: ModelParams, max_iter: int = 500, tol: float = 1e-6,
           update_sigma0: bool = False, u=None, accelerate: bool = True) -> CalibrationResult:
    """Alternate E- and M-steps until the log-likelihood gain drops below ``tol``.

    ``prices`` is a log-price array or a list of contiguous segments. With
    ``accelerate`` each iteration is a squared-extrapolation cycle (SQUAREM:
    two EM steps, an extrapolation along their difference, one stabilising EM
    step) that falls back to the plain double step whenever the extrapolated
    point scores lower, so the trace stays monotone either way.

    Raises :class:`EstimationError` if the log-likelihood ever decreases by
    more than ``1e-8`` or an EM update leaves the parameter domain.
    """
    if not params0.is_linear:
        raise ParameterError("em_fit needs kappa3 == 0")
    if max_iter < 0 or tol <= 0:
        raise ValueError("max_iter must be >= 0 and tol > 0")
    segs, us = _segment_inputs(prices, u, params0)

    def em_step(p, stats):
        try:
            new = m_step(stats, segs, us, p, update_sigma0=update_sigma0)
        except ParameterError as exc:
            raise EstimationError(str(exc)) from exc
        st = _e_all(segs, us, new)
        return new, st, sum(s.loglik for s in st)

    def checked(ll, prev, it):
        if not math.isfinite(ll):
            raise EstimationError(f"iteration {it}: non-finite log-likelihood")
        if ll < prev - MONOTONE_SLACK:
            raise EstimationError(f"iteration {it}: log-likelihood fell from {prev!r} to {ll!r}")

    params = params0
    stats = _e_all(segs, us, params)
    trace = [sum(s.loglik for s in stats)]
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        p1, s1, l1 = em_step(params, stats)
        checked(l1, trace[-1], it)
        if not accelerate:
            params, stats, ll = p1, s1, l1
        else:
            p2, s2, l2 = em_step(p1, s1)
            checked(l2, l1, it)
            x0, x1, x2 = _pack(params), _pack(p1), _pack(p2)
            params, stats, ll = p2, s2, l2
            r = x1 - x0
            v = x2 - x1 - r
            if np.linalg.norm(v) > 0:
                a = min(-np.linalg.norm(r) / np.linalg.norm(v), -1.0)
                try:
                    px = _unpack(x0 - 2 * a * r + a * a * v, params0)
                    if not update_sigma0:
                        # keep the frozen prior exact rather than its log round trip
                        px = px.replace(sigma0=params0.sigma0)
                    p3, s3, l3 = em_step(px, _e_all(segs, us, px))
                except (EstimationError, ParameterError, ValueError, FloatingPointError):
                    l3 = -math.inf
                if math.isfinite(l3) and l3 > l2:
                    params, stats, ll = p3, s3, l3
        trace.append(ll)
        if abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
    return CalibrationResult(params, trace[-1], trace, it, converged)


def hessian_tstats(loglik_fn: Callable[[ModelParams], float], params: ModelParams,
                   names: Sequence[str], rel_step: float = 1e-4,
                   abs_floor: float = 1e-3) -> tuple[dict[str, float | None], list[str]]:
    """t-statistics from the inverse observed information of ``loglik_fn``.

    The Hessian is taken by central differences with step
    ``rel_step * max(|theta_i|, abs_floor)``. Parameters along a flat or
    non-concave direction get ``None`` and a diagnostic line.
    """
    theta = np.array([getattr(params, n) for n in names], dtype=float)
    h = rel_step * np.maximum(np.abs(theta), abs_floor)
    k = theta.size

    def f(x):
        # the likelihood is even in each volatility, so steps may cross zero
        vals = {n: (abs(float(v)) if n in VOLATILITIES else float(v)) for n, v in zip(names, x)}
        try:
            return loglik_fn(params.replace(**vals))
        except ParameterError:
            return -np.inf

    f0 = f(theta)
    H = np.empty((k, k))
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h[i]
        H[i, i] = (f(theta + ei) - 2 * f0 + f(theta - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(k)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(theta + ei + ej) - f(theta + ei - ej)
                                 - f(theta - ei + ej) + f(theta - ei - ej)) / (4 * h[i] * h[j])

    info = -H
    diags: list[str] = []
    keep = [i for i in range(k) if np.isfinite(info[i]).all() and info[i, i] > 0]
    for i in set(range(k)) - set(keep):
        diags.append(f"{names[i]}: flat or non-concave log-likelihood direction "
                     f"(information {info[i, i]:.3g}); t-stat unavailable")
    while keep:
        sub = info[np.ix_(keep, keep)]
        d = np.sqrt(np.diag(sub))
        corr = sub / np.outer(d, d)
        w, vecs = np.linalg.eigh(corr)
        bad = w <= 1e-10 * max(w.max(), 1.0)
        if not bad.any():
            break
        # drop the parameter loading most on the worst direction, then retry
        worst = keep[int(np.argmax(np.abs(vecs[:, 0])))]
        diags.append(f"{names[worst]}: information matrix not positive definite along this "
                     f"direction; t-stat unavailable")
        keep.remove(worst)

    out: dict[str, float | None] = {n: None for n in names}
    if keep:
        cov = np.linalg.inv(info[np.ix_(keep, keep)])
        for pos, i in enumerate(keep):
            out[names[i]] = float(theta[i] / math.sqrt(cov[pos, pos]))
    return out, diags


def standard_errors(loglik_fn, params, names, rel_step=1e-4):
    """Standard errors implied by :func:`hessian_tstats` (``None`` where absent)."""
    t, _ = hessian_tstats(loglik_fn, params, names, rel_step)
    return {n: (abs(getattr(params, n) / t[n]) if t[n] else None) for n in names}


def em_tstats(result: CalibrationResult, prices, u=None,
              names: Sequence[str] = TSTAT_NAMES, rel_step: float = 1e-4) -> dict[str, float | None]:
    """t-statistics of a linear calibration; ``sigma0`` is held fixed.

    Diagnostics for absent entries are appended to ``result.diagnostics`` and
    the map is stored on ``result.tstats``.
    """
    from .kalman import kf_predictive_loglik

    segs, us = _segment_inputs(prices, u, result.params)

    def ll(p: ModelParams) -> float:
        priors = segment_priors(segs, p)
        return sum(kf_predictive_loglik(kf_forward(s, uu, p, v0=m))
                   for s, uu, m in zip(segs, us, priors))

    t, diags = hessian_tstats(ll, result.params, names, rel_step)
    result.tstats = t
    result.diagnostics.extend(diags)
    return t
