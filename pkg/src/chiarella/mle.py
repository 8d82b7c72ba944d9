"""Direct likelihood calibration and the two-step per-asset / per-class protocol.

Step 1 fits each asset on its own: EM for the linear model, BFGS on the
unscented predictive likelihood for the cubic one. Step 2 ties a subset of
parameters across an asset class and maximises the summed likelihood with the
per-asset parameters frozen at their step-1 values.
"""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .em import CalibrationResult, EstimationError, em_fit, em_tstats, hessian_tstats
from .kalman import as_segments, loglik as kf_loglik
from .model import ModelParams, ParameterError
from .ukf import DEFAULT_UT, UtConfig, ukf_loglik

log = logging.getLogger(__name__)

LOG_PARAMS = frozenset({"sigma_N", "sigma_V", "sigma0", "beta"})
SHAREABLE = ("kappa", "kappa3", "beta", "sigma_V")
PER_ASSET = ("sigma_N", "g", "v0", "sigma0", "gamma")
NONLINEAR_TSTATS = ("kappa", "kappa3", "beta", "sigma_N", "g", "v0")


@dataclass(frozen=True)
class FitConfig:
    """Options for :func:`fit_asset` and :func:`fit_class`.

    ``free`` lists the parameters optimised in a nonlinear single-asset fit;
    the default follows the protocol of freezing ``kappa``, ``kappa3``,
    ``beta`` and ``sigma_V`` in step 1.
    """

    free: tuple[str, ...] = ("sigma_N", "g", "v0")
    max_iter: int = 500
    tol: float = 1e-6
    max_evals: int = 5000
    gtol: float = 1e-6
    rel_step: float = 1e-5
    n_starts: int = 5
    jitter: float = 0.5
    seed: int = 0
    alternations: int = 1
    kappa3_seed: float = 0.1
    ut: UtConfig = DEFAULT_UT

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "ut"}
        d["free"] = list(self.free)
        d["ut"] = {"a": self.ut.a, "k": self.ut.k, "b": self.ut.b}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        if "free" in d:
            d["free"] = tuple(d["free"])
        if "ut" in d:
            d["ut"] = UtConfig(**d["ut"])
        return cls(**d)


@dataclass
class OptResult:
    theta: np.ndarray
    value: float
    converged: bool
    nfev: int
    message: str


# -- parameter vectors ---------------------------------------------------------

def to_theta(params: ModelParams, names: Sequence[str]) -> np.ndarray:
    """Unconstrained vector; positive parameters enter as logs."""
    out = []
    for n in names:
        v = getattr(params, n)
        if n in LOG_PARAMS:
            if v <= 0:
                raise ParameterError(f"{n} must be > 0 to enter the log scale, got {v}")
            v = math.log(v)
        out.append(v)
    return np.array(out, dtype=float)


def from_theta(theta, names: Sequence[str], template: ModelParams) -> ModelParams:
    vals = {n: (math.exp(t) if n in LOG_PARAMS else float(t)) for n, t in zip(names, theta)}
    return template.replace(**vals)


def series_loglik(prices, params: ModelParams, model: str, ut: UtConfig = DEFAULT_UT) -> float:
    if model == "linear":
        return kf_loglik(prices, params)
    if model == "nonlinear":
        return ukf_loglik(prices, params, ut)
    raise ValueError(f"unknown model {model!r}")


def neg_loglik(theta, series, fixed: ModelParams, model: str, names: Sequence[str],
               ut: UtConfig = DEFAULT_UT) -> float:
    """Negative predictive log-likelihood at ``theta``; ``+inf`` when undefined."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            val = -series_loglik(series, from_theta(theta, names, fixed), model, ut)
    except (ParameterError, OverflowError, ValueError) as exc:
        log.debug("neg_loglik undefined at %s: %s", theta, exc)
        return math.inf
    if not math.isfinite(val):
        log.debug("neg_loglik non-finite at %s", theta)
        return math.inf
    return val


# -- optimiser -----------------------------------------------------------------

class _Budget(Exception):
    pass


def central_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                     rel_step: float = 1e-5) -> np.ndarray:
    h = rel_step * np.maximum(np.abs(x), 1.0)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h[i]
        g[i] = (f(x + e) - f(x - e)) / (2 * h[i])
    return g


def optimize(objective: Callable[[np.ndarray], float], theta0, max_evals: int = 5000,
             gtol: float = 1e-6, rel_step: float = 1e-5, precondition: bool = True) -> OptResult:
    """BFGS with central-difference gradients.

    With ``precondition`` the coordinates are rescaled by the square root of
    the diagonal curvature at ``theta0`` so that all directions start on a
    comparable scale. ``max_evals`` caps objective evaluations, gradients
    included; hitting it returns the best point so far with
    ``converged=False``.
    """
    theta0 = np.asarray(theta0, dtype=float)
    count = 0
    best = [math.inf, theta0.copy()]

    def f(x):
        nonlocal count
        if count >= max_evals:
            raise _Budget
        count += 1
        v = objective(x)
        if v < best[0]:
            best[0], best[1] = v, x.copy()
        return v

    f0 = objective(theta0)
    count += 1
    if not math.isfinite(f0):
        raise ValueError("objective is not finite at the starting point")
    scale = np.ones_like(theta0)
    if precondition:
        h = 1e-4 * np.maximum(np.abs(theta0), 1.0)
        for i in range(theta0.size):
            e = np.zeros_like(theta0)
            e[i] = h[i]
            c = (objective(theta0 + e) - 2 * f0 + objective(theta0 - e)) / h[i] ** 2
            count += 2
            if math.isfinite(c) and c > 0:
                scale[i] = 1.0 / math.sqrt(c)

    def fz(z):
        return f(theta0 + scale * z)

    def gz(z):
        # step relative to the unscaled coordinate, expressed in z units
        x = theta0 + scale * z
        hx = rel_step * np.maximum(np.abs(x), 1.0)
        hz = hx / scale
        g = np.empty_like(z)
        for i in range(z.size):
            e = np.zeros_like(z)
            e[i] = hz[i]
            g[i] = (fz(z + e) - fz(z - e)) / (2 * hz[i])
        return g

    z0 = np.zeros_like(theta0)
    try:
        with np.errstate(all="ignore"):
            res = minimize(fz, z0, jac=gz, method="BFGS",
                           options={"gtol": gtol, "maxiter": 10 ** 6})
        theta = theta0 + scale * res.x
        value, ok, msg = float(res.fun), bool(res.success), str(res.message)
        if not ok and "precision" in msg:
            # line search stalled on finite-difference noise; accept if the gradient is small
            gnorm = float(np.max(np.abs(gz(res.x))))
            ok = gnorm < max(gtol, 1e-8 * abs(value)) * 1e2
            msg = f"{msg} (|grad|={gnorm:.2e})"
    except _Budget:
        theta, value, ok, msg = best[1], best[0], False, f"stopped after {max_evals} evaluations"
    if best[0] < value:
        theta, value = best[1], best[0]
    return OptResult(theta, value, ok, count, msg)


def multi_start(objective, theta0, n_starts: int, jitter: float, seed: int,
                **kw) -> OptResult:
    """Best of ``n_starts`` BFGS runs: ``theta0`` itself plus seeded jittered copies."""
    rng = np.random.default_rng(seed)
    theta0 = np.asarray(theta0, dtype=float)
    starts = [theta0] + [theta0 + jitter * rng.standard_normal(theta0.size)
                         * np.maximum(np.abs(theta0), 0.1) * 0.1 for _ in range(n_starts - 1)]
    best: OptResult | None = None
    for s in starts:
        if not math.isfinite(objective(s)):
            continue
        r = optimize(objective, s, **kw)
        if best is None or r.value < best.value:
            best = r
    assert best is not None
    return best


# -- step 1 --------------------------------------------------------------------

def _prices_of(series):
    if hasattr(series, "segments"):
        return series.segments()
    return as_segments(series)


def nonlinear_start(params: ModelParams, kappa3_seed: float = 0.1) -> ModelParams:
    """Seed a cubic fit from a linear one: small positive ``kappa3`` if it is zero."""
    if params.kappa3 != 0.0:
        return params
    return params.replace(kappa3=kappa3_seed * max(abs(params.kappa), 0.1))


def fit_asset(series, model: str, config: FitConfig = FitConfig(),
              params0: ModelParams | None = None) -> CalibrationResult:
    """Single-asset calibration.

    ``model="linear"`` runs EM from ``params0``. ``model="nonlinear"`` runs
    multi-start BFGS over ``config.free`` with every other field of
    ``params0`` frozen, so ``sigma_V`` from a linear fit stays bit-identical.
    """
    params0 = params0 or ModelParams()
    prices = _prices_of(series)
    if model == "linear":
        res = em_fit(prices, params0.replace(kappa3=0.0), config.max_iter, config.tol)
        em_tstats(res, prices)
        return res
    if model != "nonlinear":
        raise ValueError(f"unknown model {model!r}")
    start = nonlinear_start(params0, config.kappa3_seed)
    names = tuple(config.free)
    obj = lambda th: neg_loglik(th, prices, start, "nonlinear", names, config.ut)  # noqa: E731
    opt = multi_start(obj, to_theta(start, names), config.n_starts, config.jitter, config.seed,
                      max_evals=config.max_evals, gtol=config.gtol, rel_step=config.rel_step)
    fitted = from_theta(opt.theta, names, start)
    ll0 = -obj(to_theta(start, names))
    res = CalibrationResult(fitted, -opt.value, [ll0, -opt.value], opt.nfev, opt.converged,
                            model="nonlinear")
    if not opt.converged:
        res.diagnostics.append(f"optimizer: {opt.message}")
    mle_tstats(res, prices, names=names, ut=config.ut)
    return res


def _fit_one(args):
    series, model, config, params0, capture = args
    try:
        return fit_asset(series, model, config, params0)
    except (EstimationError, ParameterError, ValueError, FloatingPointError) as exc:
        if not capture:
            raise
        return exc


def default_workers() -> int:
    env = os.environ.get("CHIARELLA_WORKERS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def fit_assets(series_list, model: str, config: FitConfig = FitConfig(),
               params0: Sequence[ModelParams] | ModelParams | None = None,
               workers: int = 1, capture_errors: bool = False) -> list:
    """Step 1 over many assets, optionally in a process pool (results keep input order).

    With ``capture_errors`` a failing asset yields its exception in place of a
    result instead of aborting the batch.
    """
    if params0 is None or isinstance(params0, ModelParams):
        params0 = [params0] * len(series_list)
    jobs = [(s, model, config, p, capture_errors) for s, p in zip(series_list, params0)]
    if workers <= 1 or len(jobs) <= 1:
        return [_fit_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_fit_one, jobs))


def mle_tstats(result: CalibrationResult, series, names: Sequence[str] = NONLINEAR_TSTATS,
               ut: UtConfig = DEFAULT_UT, rel_step: float = 1e-4) -> dict[str, float | None]:
    """t-statistics from the numerical information of the unscented likelihood."""
    prices = _prices_of(series)
    t, diags = hessian_tstats(lambda p: ukf_loglik(prices, p, ut), result.params, names, rel_step)
    result.tstats = t
    result.diagnostics.extend(diags)
    return t


# -- step 2 --------------------------------------------------------------------

@dataclass
class ClassFitSpec:
    assets: list
    shared_params: tuple[str, ...] = ("kappa", "beta", "sigma_V")
    per_asset_params: tuple[str, ...] = ("sigma_N", "g", "v0", "sigma0", "gamma")
    model: str = "linear"
    names: list[str] | None = None

    def __post_init__(self) -> None:
        sh, pa = set(self.shared_params), set(self.per_asset_params)
        if not sh <= set(SHAREABLE):
            raise ValueError(f"shared parameters must come from {SHAREABLE}")
        if not pa <= set(PER_ASSET):
            raise ValueError(f"per-asset parameters must come from {PER_ASSET}")
        if sh & pa:
            raise ValueError("shared and per-asset parameter sets overlap")
        if self.model not in ("linear", "nonlinear"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.names is None:
            self.names = [getattr(a, "name", f"asset{i}") for i, a in enumerate(self.assets)]


@dataclass
class ClassFitResult:
    shared: dict[str, float]
    per_asset: dict[str, CalibrationResult]
    total_loglik: float
    initial_loglik: float
    converged: bool
    tstats: dict[str, float | None] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "shared": dict(self.shared),
            "per_asset": {k: v.to_dict() for k, v in self.per_asset.items()},
            "total_loglik": self.total_loglik,
            "initial_loglik": self.initial_loglik,
            "converged": self.converged,
            "tstats": dict(self.tstats),
            "diagnostics": list(self.diagnostics),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def fit_class(spec: ClassFitSpec, per_asset_results: Sequence[CalibrationResult],
              config: FitConfig = FitConfig()) -> ClassFitResult:
    """Maximise the summed likelihood over the shared parameters.

    Starts from the per-asset average of the shared fields. With
    ``config.alternations > 1`` the per-asset step is re-run with the new
    shared values between rounds.
    """
    if len(per_asset_results) != len(spec.assets):
        raise ValueError("one step-1 result per asset required")
    diags: list[str] = []
    if len(spec.assets) < 2:
        warnings.warn("class fit with fewer than two assets reduces to a single-asset fit",
                      RuntimeWarning, stacklevel=2)
        diags.append("fewer than two assets in class")
    prices = [_prices_of(a) for a in spec.assets]
    names = tuple(spec.shared_params)
    params = [r.params for r in per_asset_results]
    if spec.model == "nonlinear":
        params = [nonlinear_start(p, config.kappa3_seed) for p in params]
    shared0 = {n: float(np.mean([getattr(p, n) for p in params])) for n in names}

    def total(theta, plist):
        s = 0.0
        for pr, p in zip(prices, plist):
            v = neg_loglik(theta, pr, p, spec.model, names, config.ut)
            if not math.isfinite(v):
                return math.inf
            s += v
        return s

    template = params[0].replace(**shared0)
    theta = to_theta(template, names)
    init_ll = -total(theta, params)
    converged = True
    for rnd in range(max(1, config.alternations)):
        opt = multi_start(lambda th: total(th, params), theta, config.n_starts, config.jitter,
                          config.seed + rnd, max_evals=config.max_evals, gtol=config.gtol,
                          rel_step=config.rel_step)
        theta = opt.theta
        converged = opt.converged
        if not opt.converged:
            diags.append(f"round {rnd + 1}: {opt.message}")
        shared_now = {n: getattr(from_theta(theta, names, template), n) for n in names}
        params = [p.replace(**shared_now) for p in params]
        if rnd + 1 < config.alternations:
            free = tuple(n for n in ("sigma_N", "g", "v0") if n in spec.per_asset_params)
            params = [_refit_per_asset(a, p, spec.model, free, config)
                      for a, p in zip(spec.assets, params)]

    shared = {n: getattr(params[0], n) for n in names}
    per_asset: dict[str, CalibrationResult] = {}
    lls = []
    for nm, pr, p in zip(spec.names, prices, params):
        ll = series_loglik(pr, p, spec.model, config.ut)
        lls.append(ll)
        per_asset[nm] = CalibrationResult(p, ll, [ll], 0, converged, model=spec.model)

    def class_ll(p: ModelParams) -> float:
        vals = {n: getattr(p, n) for n in names}
        return sum(series_loglik(pr, q.replace(**vals), spec.model, config.ut)
                   for pr, q in zip(prices, params))

    tstats, td = hessian_tstats(class_ll, params[0], names)
    return ClassFitResult(shared, per_asset, float(sum(lls)), float(init_ll), converged,
                          tstats, diags + td)


def _refit_per_asset(series, params: ModelParams, model: str, free: tuple[str, ...],
                     config: FitConfig) -> ModelParams:
    """Per-asset refit with the shared fields frozen, started from ``params``."""
    prices = _prices_of(series)
    obj = lambda th: neg_loglik(th, prices, params, model, free, config.ut)  # noqa: E731
    opt = optimize(obj, to_theta(params, free), max_evals=config.max_evals, gtol=config.gtol,
                   rel_step=config.rel_step)
    return from_theta(opt.theta, free, params)
