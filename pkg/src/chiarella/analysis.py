"""Trend/value regressions, distortion statistics, Silverman's mode test, Gordon value."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.signal import fftconvolve

from .model import trend_signal

TERMS = ("const", "m", "m2", "m3", "d", "d3")
# the seven regressor sets of the trend/value effect tables
TABLE_ROWS = (
    ("m",), ("m", "m2", "m3"), ("d",), ("d", "d3"), ("m", "d"),
    ("m", "m2", "m3", "d"), ("m", "m2", "m3", "d", "d3"),
)
FULL_TERMS = TABLE_ROWS[-1]


# -- regressions ---------------------------------------------------------------

@dataclass
class RegressionReport:
    terms: list[str]
    coefficients: dict[str, float]
    stderr: dict[str, float]
    pvalues: dict[str, float]
    adj_r2: float
    r2: float
    n: int
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def effect_series(prices, v, alpha: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Aligned ``(r_{t+1}, m_t, d_t)`` with ``d = v - p`` (positive when under-priced)."""
    p = np.asarray(prices, dtype=float)
    v = np.asarray(v, dtype=float)
    if v.shape != p.shape:
        raise ValueError("prices and values must be aligned")
    m = trend_signal(p, alpha)
    return np.diff(p), m[:-1], (v - p)[:-1]


def _design(m, d, terms: Sequence[str]) -> np.ndarray:
    cols = {"m": lambda: m, "m2": lambda: m ** 2, "m3": lambda: m ** 3,
            "d": lambda: d, "d3": lambda: d ** 3}
    out = [np.ones_like(m if m is not None else d)]
    for t in terms:
        if t == "const":
            continue
        if t not in cols:
            raise ValueError(f"unknown term {t!r}; choose from {TERMS}")
        if (t[0] == "m" and m is None) or (t[0] == "d" and d is None):
            raise ValueError(f"term {t!r} needs the {t[0]} series")
        out.append(cols[t]())
    return np.column_stack(out)


def regress_effects(returns, m=None, d=None, terms: Sequence[str] = FULL_TERMS) -> RegressionReport:
    """OLS of returns on an intercept plus polynomial trend and value terms.

    Standard errors are homoskedastic. A rank-deficient design returns NaN
    statistics for all terms and a diagnostic.
    """
    y = np.asarray(returns, dtype=float)
    m = None if m is None else np.asarray(m, dtype=float)
    d = None if d is None else np.asarray(d, dtype=float)
    names = ["const"] + [t for t in terms if t != "const"]
    X = _design(m, d, names)
    n, k = X.shape
    if y.shape != (n,):
        raise ValueError("returns and regressors must be aligned")
    if n <= k:
        raise ValueError(f"need more than {k} observations, got {n}")
    diags: list[str] = []
    beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    ssr = float(resid @ resid)
    sst = float(((y - y.mean()) ** 2).sum())
    dof = n - k
    r2 = 1.0 - ssr / sst if sst > 0 else 1.0
    adj = 1.0 - (1.0 - r2) * (n - 1) / dof
    if rank < k:
        diags.append(f"design matrix has rank {rank} < {k}; coefficients not identified")
        nan = {t: math.nan for t in names}
        return RegressionReport(names, dict(zip(names, map(float, beta))), nan, dict(nan),
                                adj, r2, n, diags)
    cov = (ssr / dof) * np.linalg.inv(X.T @ X)
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        tval = np.where(se > 0, beta / se, np.where(beta == 0, 0.0, np.inf))
    pv = 2.0 * stats.t.sf(np.abs(tval), dof)
    return RegressionReport(names, dict(zip(names, map(float, beta))),
                            dict(zip(names, map(float, se))), dict(zip(names, map(float, pv))),
                            float(adj), float(r2), n, diags)


def pooled_regression(blocks: Sequence[tuple], terms: Sequence[str] = FULL_TERMS,
                      standardize: bool = True) -> RegressionReport:
    """Regression over several assets' ``(returns, m, d)`` blocks stacked together.

    With ``standardize`` each asset's ``m`` and ``d`` are z-scored before the
    powers are formed, so heterogeneous volatilities share one scale.
    """
    ys, ms, ds = [], [], []
    for r, m, d in blocks:
        m = np.asarray(m, dtype=float)
        d = np.asarray(d, dtype=float)
        if standardize:
            m = (m - m.mean()) / m.std()
            d = (d - d.mean()) / d.std()
        ys.append(np.asarray(r, dtype=float))
        ms.append(m)
        ds.append(d)
    return regress_effects(np.concatenate(ys), np.concatenate(ms), np.concatenate(ds), terms)


# -- Silverman test ------------------------------------------------------------

GRID = 2048
DENSITY_FLOOR = 1e-9


def hall_york_factor(alpha: float = 0.05) -> float:
    """Bandwidth inflation that calibrates the k=1 test to level ``alpha``."""
    a = alpha
    num = 0.94029 * a ** 3 - 1.59914 * a ** 2 + 0.17695 * a + 0.48971
    den = a ** 3 - 1.77793 * a ** 2 + 0.36162 * a + 0.42423
    return num / den


def kde_on_grid(x: np.ndarray, h: float, n_grid: int = GRID) -> tuple[np.ndarray, np.ndarray]:
    """Linearly binned Gaussian KDE on ``n_grid`` points over ``[min-3h, max+3h]``."""
    lo, hi = float(x.min()) - 3 * h, float(x.max()) + 3 * h
    grid = np.linspace(lo, hi, n_grid)
    delta = grid[1] - grid[0]
    pos = (x - lo) / delta
    i = np.minimum(pos.astype(np.int64), n_grid - 2)
    w = pos - i
    counts = (np.bincount(i, 1.0 - w, minlength=n_grid)
              + np.bincount(i + 1, w, minlength=n_grid))
    L = min(n_grid - 1, int(math.ceil(6 * h / delta)))
    off = np.arange(-L, L + 1) * delta
    kern = np.exp(-0.5 * (off / h) ** 2) / (h * math.sqrt(2 * math.pi) * x.size)
    return grid, fftconvolve(counts, kern, mode="same")


def count_modes(x: np.ndarray, h: float, n_grid: int = GRID) -> int:
    """Local maxima of the KDE, ignoring ripples below ``DENSITY_FLOOR`` of the peak."""
    _, f = kde_on_grid(x, h, n_grid)
    f = np.where(f < DENSITY_FLOOR * f.max(), 0.0, f)
    s = np.sign(np.diff(f))
    s = s[s != 0]
    return int(np.count_nonzero((s[:-1] > 0) & (s[1:] < 0))) + int(s.size > 0 and s[-1] > 0)


def critical_bandwidth(x: np.ndarray, k: int, rtol: float = 1e-4, n_grid: int = GRID) -> float:
    """Smallest bandwidth whose KDE has at most ``k`` modes (bisection)."""
    sd = float(np.std(x))
    hi = sd
    while count_modes(x, hi, n_grid) > k:
        hi *= 2
    lo = hi / 2
    while count_modes(x, lo, n_grid) <= k:
        hi, lo = lo, lo / 2
        if lo < 1e-12 * sd:
            return hi
    while (hi - lo) > rtol * hi:
        mid = 0.5 * (lo + hi)
        if count_modes(x, mid, n_grid) <= k:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class SilvermanResult:
    k: int
    p_value: float
    h_crit: float
    h_test: float
    B: int
    n: int


def silverman_test(sample, k: int = 1, B: int = 500, seed: int = 0, adjust: bool = True,
                   alpha: float = 0.05, workers: int = 1, full: bool = False):
    """Bootstrap p-value for "at most ``k`` modes".

    Each replicate is a smoothed bootstrap draw at the critical bandwidth,
    shrunk to keep the sample variance, and counts as evidence against the
    null when its KDE has more than ``k`` modes. For ``k == 1`` with
    ``adjust``, modes are counted at ``hall_york_factor(alpha) * h_crit``.
    Replicate ``b`` draws from its own ``SeedSequence`` child, so the result
    does not depend on ``workers``.
    """
    x = np.asarray(sample, dtype=float).ravel()
    if k < 1:
        raise ValueError("k must be >= 1")
    if x.size < 50:
        raise ValueError("need at least 50 observations")
    if B < 200:
        raise ValueError("need at least 200 bootstrap replicates")
    var = float(np.var(x))
    if not var > 0:
        raise ValueError("sample has zero variance")
    h = critical_bandwidth(x, k)
    h_test = h * hall_york_factor(alpha) if (adjust and k == 1) else h
    mean = float(x.mean())
    shrink = 1.0 / math.sqrt(1.0 + h * h / var)
    children = np.random.SeedSequence(seed).spawn(B)

    def replicate(ss) -> bool:
        rng = np.random.default_rng(ss)
        y = x[rng.integers(0, x.size, x.size)]
        y = mean + (y - mean + h * rng.standard_normal(x.size)) * shrink
        return count_modes(y, h_test) > k

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            hits = sum(ex.map(replicate, children))
    else:
        hits = sum(map(replicate, children))
    p = hits / B
    return SilvermanResult(k, p, h, h_test, B, x.size) if full else p


# -- distortion ----------------------------------------------------------------

@dataclass
class DistortionStats:
    variance: float
    rms: float
    mean: float
    n: int
    bin_edges: list[float]
    counts: list[int]
    silverman: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["silverman"] = {str(k): v for k, v in self.silverman.items()}
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def histogram_csv(self, path) -> None:
        write_histogram_csv(path, self.bin_edges, self.counts)


def write_histogram_csv(path, edges, counts) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(a)), repr(float(b)), int(c)])


def distortion_stats(p, v, bins: int = 50, silverman_k: Sequence[int] = (), B: int = 500,
                     seed: int = 0, thin: int = 1) -> DistortionStats:
    """Moments and histogram of ``delta = p - v``.

    ``thin`` subsamples every ``thin``-th observation for the mode tests only;
    the bootstrap treats the sample as independent, which a persistent
    distortion series is not.
    """
    delta = np.asarray(p, dtype=float) - np.asarray(v, dtype=float)
    if delta.ndim != 1 or delta.size == 0:
        raise ValueError("need a non-empty aligned series")
    mean = float(delta.mean())
    rms = math.sqrt(float(np.mean((delta - mean) ** 2)))
    counts, edges = np.histogram(delta, bins=bins)
    sil = {int(k): silverman_test(delta[::thin], k, B, seed) for k in silverman_k}
    # variance is stored as rms*rms so the two agree bit for bit
    return DistortionStats(rms * rms, rms, mean, int(delta.size),
                           [float(e) for e in edges], [int(c) for c in counts], sil)


# -- Gordon value --------------------------------------------------------------

def gordon_terminal(d_last: float, discount: float, growth: float) -> float:
    """Gordon block ``D (1 + g) / (r - g)``."""
    if discount <= growth:
        raise ValueError("discount rate must exceed terminal growth")
    return d_last * (1.0 + growth) / (discount - growth)


def gordon_value(dividends, discount: float, terminal_growth: float,
                 periods_per_year: int = 1) -> np.ndarray:
    """Log of discounted observed dividends after ``t`` plus a terminal Gordon block.

    Annual rates are converted to per-period compound rates when
    ``periods_per_year > 1``.
    """
    D = np.asarray(dividends, dtype=float)
    if D.ndim != 1 or D.size == 0 or np.any(D <= 0):
        raise ValueError("dividends must be a non-empty series of positive values")
    if discount <= terminal_growth:
        raise ValueError("discount rate must exceed terminal growth")
    r = (1.0 + discount) ** (1.0 / periods_per_year) - 1.0
    g = (1.0 + terminal_growth) ** (1.0 / periods_per_year) - 1.0
    T = D.size - 1
    disc = (1.0 + r) ** -np.arange(D.size, dtype=float)
    # value_t (1+r)^{-t} = sum_{s>t} D_s (1+r)^{-s} + terminal (1+r)^{-T}
    tail = np.concatenate([np.cumsum((D * disc)[::-1])[::-1][1:], [0.0]])
    pv = tail + gordon_terminal(D[-1], r, g) * disc[T]
    return np.log(pv / disc)
