"""Monthly price ingestion: CSV parsing, CPI deflation, exclusion windows, dataset manifests.

Input CSV: header ``date,price`` (or ``date,log_price``) with ISO dates
(``YYYY-MM`` or ``YYYY-MM-DD``), one row per consecutive month, and an
optional ``cpi`` column. A dataset manifest (YAML or JSON) lists assets::

    alpha: 0.142857          # or tau: 6
    model: linear
    fit: {max_iter: 500, n_starts: 5}
    cpi:
      US: us_cpi.csv         # header date,cpi
    assets:
      - name: US
        class: index
        path: us.csv
        cpi: US              # key into cpi, or a path
        exclude: [["1939-09", "1948-12"]]

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

ASSET_CLASSES = ("index", "commodity", "fx", "bond")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def parse_month(text: str) -> np.datetime64:
    """ISO ``YYYY-MM`` or ``YYYY-MM-DD`` to a month; the day is discarded."""
    s = text.strip()
    if len(s) not in (7, 10) or s[4] != "-":
        raise ValueError(f"not an ISO date: {text!r}")
    return np.datetime64(np.datetime64(s, "D" if len(s) == 10 else "M"), "M")


@dataclass
class AssetSeries:
    name: str
    asset_class: str
    dates: np.ndarray
    log_price: np.ndarray
    excluded: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.asset_class not in ASSET_CLASSES:
            raise DataError(f"asset class must be one of {ASSET_CLASSES}, got {self.asset_class!r}")
        self.dates = np.asarray(self.dates, dtype="datetime64[M]")
        self.log_price = np.asarray(self.log_price, dtype=float)
        if self.dates.shape != self.log_price.shape or self.dates.ndim != 1:
            raise DataError("dates and prices must be aligned one-dimensional arrays")
        if self.dates.size and np.any(np.diff(self.dates).astype(int) != 1):
            raise DataError(f"{self.name}: dates must be consecutive months")

    def __len__(self) -> int:
        return self.log_price.size

    def mask(self) -> np.ndarray:
        """True on months kept after exclusions."""
        keep = np.ones(self.dates.size, dtype=bool)
        for a, b in self.excluded:
            keep &= ~((self.dates >= parse_month(a)) & (self.dates <= parse_month(b)))
        return keep

    def segment_slices(self) -> list[slice]:
        """Contiguous kept runs with at least two prices."""
        keep = np.concatenate([[False], self.mask(), [False]])
        edges = np.flatnonzero(np.diff(keep.astype(np.int8)))
        return [slice(a, b) for a, b in zip(edges[::2], edges[1::2]) if b - a >= 2]

    def segments(self) -> list[np.ndarray]:
        return [self.log_price[s] for s in self.segment_slices()]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "log_price"])
            for d, p in zip(self.dates, self.log_price):
                w.writerow([str(d), repr(float(p))])


@dataclass(frozen=True)
class CpiSeries:
    dates: np.ndarray
    values: np.ndarray


def _rows(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for row in reader:
            if row and any(c.strip() for c in row):
                yield reader.line_num, header, row


def _read_table(path, value_cols: Sequence[str]) -> tuple[list[str], dict[str, list], list[int]]:
    dates: list[np.datetime64] = []
    cols: dict[str, list] = {}
    lines: list[int] = []
    header: list[str] | None = None
    for line, hdr, row in _rows(path):
        if header is None:
            header = hdr
            if "date" not in header:
                raise DataError(f"{path}: header must contain a 'date' column")
            present = [c for c in value_cols if c in header]
            cols = {c: [] for c in present}
        if len(row) != len(header):
            raise DataError(f"{path}, line {line}: expected {len(header)} fields, got {len(row)}")
        rec = dict(zip(header, row))
        try:
            dates.append(parse_month(rec["date"]))
        except ValueError as exc:
            raise DataError(f"{path}, line {line}: {exc}") from None
        for c in cols:
            try:
                val = float(rec[c])
            except ValueError:
                raise DataError(f"{path}, line {line}: {c} is not a number: {rec[c]!r}") from None
            if not math.isfinite(val):
                raise DataError(f"{path}, line {line}: {c} is not finite")
            cols[c].append(val)
        lines.append(line)
    if header is None:
        raise DataError(f"{path}: no data rows")
    for i in range(1, len(dates)):
        step = int((dates[i] - dates[i - 1]).astype(int))
        if step == 0:
            raise DataError(f"{path}, line {lines[i]}: duplicate date {dates[i]}")
        if step != 1:
            raise DataError(f"{path}, line {lines[i]}: dates must be consecutive months "
                            f"({dates[i - 1]} -> {dates[i]})")
    return dates, cols, lines


def load_cpi(path) -> CpiSeries:
    dates, cols, lines = _read_table(path, ("cpi",))
    if "cpi" not in cols:
        raise DataError(f"{path}: header must contain a 'cpi' column")
    for v, ln in zip(cols["cpi"], lines):
        if v <= 0:
            raise DataError(f"{path}, line {ln}: cpi must be positive, got {v}")
    return CpiSeries(np.array(dates, dtype="datetime64[M]"), np.array(cols["cpi"]))


def load_series(path, name: str | None = None, asset_class: str = "index",
                cpi: CpiSeries | None = None, excluded: Sequence[Sequence[str]] = ()) -> AssetSeries:
    """Parse a monthly price CSV into log prices.

    A ``cpi`` column in the file, or a separate ``cpi`` series, deflates the
    prices to the last observation's price level.
    """
    path = Path(path)
    dates, cols, lines = _read_table(path, ("price", "log_price", "cpi"))
    if ("price" in cols) == ("log_price" in cols):
        raise DataError(f"{path}: header needs exactly one of 'price' or 'log_price'")
    if "price" in cols:
        for v, ln in zip(cols["price"], lines):
            if v <= 0:
                raise DataError(f"{path}, line {ln}: price must be positive, got {v}")
        logp = np.log(np.array(cols["price"]))
    else:
        logp = np.array(cols["log_price"])
    series = AssetSeries(name or path.stem, asset_class, np.array(dates, dtype="datetime64[M]"),
                         logp)
    if "cpi" in cols:
        if cpi is not None:
            raise DataError(f"{path}: CPI given both inline and as a separate series")
        for v, ln in zip(cols["cpi"], lines):
            if v <= 0:
                raise DataError(f"{path}, line {ln}: cpi must be positive, got {v}")
        cpi = CpiSeries(series.dates, np.array(cols["cpi"]))
    if cpi is not None:
        series = deflate(series, cpi)
    return apply_exclusions(series, excluded) if excluded else series


def deflate(series: AssetSeries, cpi: CpiSeries) -> AssetSeries:
    """Real log prices: ``log_price + log(CPI_last / CPI_t)``."""
    idx = np.searchsorted(cpi.dates, series.dates)
    ok = (idx < cpi.dates.size) & (cpi.dates[np.minimum(idx, cpi.dates.size - 1)] == series.dates)
    if not np.all(ok):
        missing = series.dates[~ok]
        raise DataError(f"{series.name}: CPI does not cover {missing[0]}"
                        + (f" and {missing.size - 1} more months" if missing.size > 1 else ""))
    c = np.log(cpi.values[idx])
    return replace(series, log_price=series.log_price + (c[-1] - c))


def apply_exclusions(series: AssetSeries, windows: Sequence[Sequence[str]]) -> AssetSeries:
    """Mark inclusive ``(start, end)`` month windows as excluded."""
    new = []
    for w in windows:
        if len(w) != 2:
            raise DataError(f"exclusion window must be (start, end), got {w!r}")
        a, b = (str(x) for x in w)
        try:
            if parse_month(a) > parse_month(b):
                raise DataError(f"exclusion window starts after it ends: {a} > {b}")
        except ValueError as exc:
            raise DataError(str(exc)) from None
        new.append((a, b))
    out = replace(series, excluded=list(series.excluded) + new)
    if not out.segment_slices():
        raise DataError(f"{series.name}: no data remains after exclusions")
    return out


# -- dataset manifests ---------------------------------------------------------

@dataclass
class Dataset:
    assets: list[AssetSeries]
    alpha: float
    model: str
    fit: dict[str, Any]
    source: dict[str, Any]

    def classes(self) -> dict[str, list[AssetSeries]]:
        out: dict[str, list[AssetSeries]] = {}
        for a in self.assets:
            out.setdefault(a.asset_class, []).append(a)
        return out


def read_config(path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        return json.loads(text)
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise DataError(f"{path}: manifest must be a mapping")
    return data


def load_dataset(path) -> Dataset:
    """Load every asset listed in a dataset manifest."""
    path = Path(path)
    cfg = read_config(path)
    base = path.parent
    if "alpha" in cfg and "tau" in cfg:
        raise DataError(f"{path}: give either alpha or tau, not both")
    alpha = float(cfg["alpha"]) if "alpha" in cfg else 1.0 / (1.0 + float(cfg.get("tau", 6)))
    assets_cfg = cfg.get("assets") or []
    if not assets_cfg:
        raise DataError(f"{path}: asset list is empty")
    cpis = {k: load_cpi(base / v) for k, v in (cfg.get("cpi") or {}).items()}
    assets = []
    for i, a in enumerate(assets_cfg):
        if "path" not in a:
            raise DataError(f"{path}: asset #{i + 1} has no path")
        cpi = None
        if a.get("cpi") is not None:
            key = str(a["cpi"])
            cpi = cpis[key] if key in cpis else load_cpi(base / key)
        assets.append(load_series(base / a["path"], a.get("name"), a.get("class", "index"), cpi,
                                  a.get("exclude") or ()))
    names = [a.name for a in assets]
    if len(set(names)) != len(names):
        raise DataError(f"{path}: asset names must be unique")
    model = cfg.get("model", "linear")
    if model not in ("linear", "nonlinear"):
        raise DataError(f"{path}: model must be linear or nonlinear")
    return Dataset(assets, alpha, model, dict(cfg.get("fit") or {}), cfg)
