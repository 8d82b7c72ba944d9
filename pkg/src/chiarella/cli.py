"""Batch command line: ``chiarella simulate | fit | analyze | report | rerun``.

Every command writes ``run_manifest.json`` next to its outputs. ``chiarella
rerun <manifest>`` replays it and reproduces the outputs byte for byte.
Exit status is 0 when every stage succeeds, 1 when some assets or stages
fail (they are listed on stderr and in ``failures.json``), and 2 on usage
errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .analysis import (TABLE_ROWS, distortion_stats, effect_series, gordon_value,
                       regress_effects, write_histogram_csv)
from .data_io import DataError, load_dataset, read_config
from .em import EstimationError
from .kalman import kf_forward, rts_smooth, segment_priors
from .mle import ClassFitSpec, FitConfig, default_workers, fit_assets, fit_class, series_loglik
from .model import PRESETS, ModelParams, trend_signal
from .simulate import default_cycle_start, detect_limit_cycle, integrate_deterministic, simulate_path
from .ukf import ukf_forward, ukf_smooth

MANIFEST = "run_manifest.json"
TABLE_COLUMNS = ("kappa", "kappa3", "beta", "gamma", "sigma_N", "sigma_V", "g", "v0", "loglik")
SIM_PRESETS = dict(PRESETS, zero_noise=PRESETS["us_linear"].replace(sigma_N=0.0, sigma_V=0.0,
                                                                     g=0.0))


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    inputs: dict[str, str]
    output_dir: str
    seed: int
    model: str | None
    options: dict[str, Any] = field(default_factory=dict)
    version: str = __version__

    def write(self, out: Path) -> None:
        _write_json(out / MANIFEST, asdict(self))

    @classmethod
    def read(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        return cls(**d)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(x: float) -> str:
    return repr(float(x))


# -- simulate ------------------------------------------------------------------

def cmd_simulate(man: RunManifest, out: Path) -> list[str]:
    o = man.options
    if o.get("params"):
        params = ModelParams.from_dict(json.loads(Path(man.inputs["params"]).read_text()))
    else:
        params = SIM_PRESETS[o["preset"]]
    path = simulate_path(params, int(o["length"]), man.seed)
    path.to_csv(out / "path.csv")
    for name, series in (("delta", path.delta), ("m", path.m)):
        counts, edges = np.histogram(series, bins=int(o["bins"]))
        write_histogram_csv(out / f"hist_{name}.csv", edges, counts)
    report = detect_limit_cycle(integrate_deterministic(
        params, default_cycle_start(params), float(o["dt"]), float(o["horizon"])))
    _write_json(out / "cycle.json", {"params": params.to_dict(), **report.to_dict()})
    return []


# -- fit -----------------------------------------------------------------------

def _gamma_rule(asset, alpha: float) -> float:
    m = np.concatenate([trend_signal(s, alpha)[1:] for s in asset.segments()])
    sd = float(np.std(m))
    if sd <= 0:
        raise EstimationError("trend signal has zero dispersion; cannot fix gamma")
    return 1.0 / (2.0 * sd)


def _start_params(asset, alpha: float) -> ModelParams:
    segs = asset.segments()
    r = np.concatenate([np.diff(s) for s in segs])
    sd = float(np.std(r)) or 1e-3
    return ModelParams(kappa=0.02, beta=0.5 * sd, gamma=_gamma_rule(asset, alpha), alpha=alpha,
                       sigma_N=sd, sigma_V=0.5 * sd, g=float(np.mean(r)), v0=float(segs[0][0]),
                       sigma0=0.1)


def _smoothed_rows(asset, params: ModelParams, model: str):
    rows = []
    for sl, seg, v0 in zip(asset.segment_slices(), asset.segments(),
                           segment_priors(asset.segments(), params)):
        if model == "linear":
            sm = rts_smooth(kf_forward(seg, None, params, v0=v0), params)
        else:
            sm = ukf_smooth(ukf_forward(seg, None, params, v0=v0), params)
        # hidden state t is the value one month earlier; extend one step for the last month
        v = np.append(sm.v_smooth, sm.v_smooth[-1] + params.g)
        V = np.append(sm.V_smooth, sm.V_smooth[-1] + params.sigma_V ** 2)
        for d, p, m, s in zip(asset.dates[sl], seg, v, np.sqrt(V)):
            rows.append([str(d), _num(p), _num(m), _num(m - s), _num(m + s)])
    return rows


def cmd_fit(man: RunManifest, out: Path, workers: int) -> list[str]:
    o = man.options
    if not read_config(man.inputs["dataset"]).get("assets"):
        raise UsageError(f"{man.inputs['dataset']}: asset list is empty")
    ds = load_dataset(man.inputs["dataset"])
    model = man.model or ds.model
    only = o.get("asset_class")
    assets = [a for a in ds.assets if only is None or a.asset_class == only]
    if not assets:
        raise UsageError(f"no assets to fit (class filter {only!r})")
    cfg = FitConfig(**{**ds.fit, **{k: o[k] for k in ("max_iter", "tol", "n_starts",
                                                         "alternations") if o.get(k) is not None},
                       "seed": man.seed})
    failures: list[str] = []
    starts = {}
    for a in assets:
        try:
            starts[a.name] = _start_params(a, ds.alpha)
        except (EstimationError, ValueError) as exc:
            failures.append(f"{a.name}: {exc}")
    ok = [a for a in assets if a.name in starts]
    step1: dict[str, Any] = {}
    results = fit_assets(ok, "linear", cfg, [starts[a.name] for a in ok], workers,
                         capture_errors=True)
    if model == "nonlinear":
        good = [(a, r) for a, r in zip(ok, results) if not isinstance(r, Exception)]
        nl = fit_assets([a for a, _ in good], "nonlinear", cfg, [r.params for _, r in good],
                        workers, capture_errors=True)
        by_name = {a.name: r for (a, _), r in zip(good, nl)}
        results = [by_name.get(a.name, r) for a, r in zip(ok, results)]
    for a, r in zip(ok, results):
        if isinstance(r, Exception):
            failures.append(f"{a.name}: {r}")
            continue
        if not all(math.isfinite(v) for v in r.params.to_dict().values()):
            failures.append(f"{a.name}: non-finite estimates")
            continue
        step1[a.name] = r
        r.to_json(out / f"fit_{a.name}.json")

    shared = ("kappa", "kappa3", "beta") if model == "nonlinear" else ("kappa", "beta", "sigma_V")
    final: dict[str, ModelParams] = {}
    by_class: dict[str, list] = {}
    for a in ok:
        if a.name in step1:
            by_class.setdefault(a.asset_class, []).append(a)
    for cls, members in sorted(by_class.items()):
        spec = ClassFitSpec(members, shared_params=shared, model=model)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = fit_class(spec, [step1[a.name] for a in members], cfg)
        _write_json(out / f"class_{cls}.json", _jsonable(res.to_dict()))
        for a in members:
            final[a.name] = res.per_asset[a.name].params

    table = []
    for a in ok:
        if a.name not in final:
            continue
        p = final[a.name]
        row = {"asset": a.name, "class": a.asset_class, **{c: getattr(p, c) for c in
                                                           TABLE_COLUMNS if c != "loglik"}}
        row["loglik"] = series_loglik(a.segments(), p, model)
        table.append(row)
        _write_rows(out / f"smoothed_{a.name}.csv",
                    ["date", "log_price", "v_smooth", "v_lower", "v_upper"],
                    _smoothed_rows(a, p, model))
    _write_json(out / "table.json", {"model": model, "columns": list(TABLE_COLUMNS),
                                     "rows": table})
    _write_rows(out / "table.csv", ["asset", "class", *TABLE_COLUMNS],
                [[r["asset"], r["class"], *(_num(r[c]) for c in TABLE_COLUMNS)] for r in table])
    return failures


# -- analyze -------------------------------------------------------------------

def _read_pv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise UsageError(f"{path}: no rows")
    pcol = next((c for c in ("p", "log_price") if c in rows[0]), None)
    vcol = next((c for c in ("v", "v_smooth") if c in rows[0]), None)
    if pcol is None or vcol is None:
        raise UsageError(f"{path}: need price (p|log_price) and value (v|v_smooth) columns")
    return (np.array([float(r[pcol]) for r in rows]), np.array([float(r[vcol]) for r in rows]))


def cmd_analyze(man: RunManifest, out: Path) -> list[str]:
    o = man.options
    if o.get("gordon") and "dividends" not in man.inputs:
        raise UsageError("Gordon value requested but no dividend file given (--dividends)")
    p, v = _read_pv(man.inputs["input"])
    r, m, d = effect_series(p, v, float(o["alpha"]))
    rows = [_jsonable(regress_effects(r, m, d, terms).to_dict()) for terms in TABLE_ROWS]
    _write_json(out / "regression.json", {"n": int(r.size), "rows": rows})
    ds = distortion_stats(p, v, int(o["bins"]), tuple(o["silverman_k"]), int(o["B"]), man.seed,
                          int(o["thin"]))
    _write_json(out / "distortion.json", ds.to_dict())
    ds.histogram_csv(out / "hist_delta.csv")
    if "dividends" in man.inputs:
        with open(man.inputs["dividends"], newline="") as fh:
            rows_d = list(csv.DictReader(fh))
        if not rows_d or "dividend" not in rows_d[0]:
            raise UsageError(f"{man.inputs['dividends']}: need a 'dividend' column")
        vals = gordon_value([float(x["dividend"]) for x in rows_d], float(o["discount"]),
                            float(o["growth"]), int(o["periods_per_year"]))
        keys = [x.get("date", str(i)) for i, x in enumerate(rows_d)]
        _write_rows(out / "gordon.csv", ["date", "log_value"],
                    [[k, _num(x)] for k, x in zip(keys, vals)])
    return []


# -- report --------------------------------------------------------------------

def cmd_report(man: RunManifest, out: Path) -> list[str]:
    run = Path(man.inputs["run_dir"])
    if not run.is_dir():
        raise UsageError(f"{run} is not a directory")
    files = []
    summary: dict[str, Any] = {}
    for f in sorted(run.iterdir()):
        if not f.is_file() or f.name in (MANIFEST, "report.json"):
            continue
        files.append({"name": f.name, "sha256": hashlib.sha256(f.read_bytes()).hexdigest(),
                      "bytes": f.stat().st_size})
        if f.suffix == ".json":
            summary[f.stem] = _summarise(json.loads(f.read_text()))
    source = run / MANIFEST
    _write_json(out / "report.json", {
        "source_command": json.loads(source.read_text())["command"] if source.exists() else None,
        "files": files, "summary": summary})
    return []


def _summarise(obj) -> dict:
    if not isinstance(obj, dict):
        return {}
    keys = ("loglik", "total_loglik", "converged", "rms", "variance", "silverman", "shared",
            "period", "converged_to_fixed_point", "model")
    return {k: obj[k] for k in keys if k in obj}


# -- driver --------------------------------------------------------------------

def _abs(p: str | None) -> str | None:
    return None if p is None else str(Path(p).resolve())


def manifest_from_args(args) -> RunManifest:
    out = str(Path(args.out).resolve())
    if args.command == "simulate":
        inputs = {"params": _abs(args.params)} if args.params else {}
        opts = {"preset": args.preset, "params": bool(args.params), "length": args.length,
                "bins": args.bins, "dt": args.dt, "horizon": args.horizon}
        return RunManifest("simulate", inputs, out, args.seed, None, opts)
    if args.command == "fit":
        opts = {"asset_class": args.asset_class, "max_iter": args.max_iter, "tol": args.tol,
                "n_starts": args.n_starts, "alternations": args.alternations}
        return RunManifest("fit", {"dataset": _abs(args.dataset)}, out, args.seed, args.model,
                           opts)
    if args.command == "analyze":
        inputs = {"input": _abs(args.input)}
        if args.dividends:
            inputs["dividends"] = _abs(args.dividends)
        opts = {"alpha": args.alpha, "bins": args.bins, "silverman_k": list(args.silverman_k),
                "B": args.B, "thin": args.thin, "gordon": args.gordon, "discount": args.discount,
                "growth": args.growth, "periods_per_year": args.periods_per_year}
        return RunManifest("analyze", inputs, out, args.seed, None, opts)
    if args.command == "report":
        return RunManifest("report", {"run_dir": _abs(args.run_dir)}, out, args.seed, None, {})
    raise UsageError(f"unknown command {args.command!r}")


def execute(man: RunManifest, workers: int = 1) -> int:
    out = Path(man.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    man.write(out)
    try:
        if man.command == "simulate":
            failures = cmd_simulate(man, out)
        elif man.command == "fit":
            failures = cmd_fit(man, out, workers)
        elif man.command == "analyze":
            failures = cmd_analyze(man, out)
        elif man.command == "report":
            failures = cmd_report(man, out)
        else:
            raise UsageError(f"unknown command {man.command!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, EstimationError, ValueError, OSError) as exc:
        failures = [f"{man.command}: {exc}"]
    if failures:
        _write_json(out / "failures.json", {"failures": failures})
        for f in failures:
            print(f"failed: {f}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chiarella", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: $CHIARELLA_WORKERS or logical cores)")

    s = sub.add_parser("simulate", help="simulate a path and integrate the deterministic system")
    common(s)
    s.add_argument("--preset", choices=sorted(SIM_PRESETS), default="us_linear")
    s.add_argument("--params", help="JSON file of model parameters (overrides --preset)")
    s.add_argument("--length", type=int, default=1200)
    s.add_argument("--bins", type=int, default=50)
    s.add_argument("--dt", type=float, default=0.01)
    s.add_argument("--horizon", type=float, default=2000.0)

    f = sub.add_parser("fit", help="two-step calibration over a dataset manifest")
    common(f)
    f.add_argument("--dataset", required=True, help="YAML or JSON dataset manifest")
    f.add_argument("--model", choices=("linear", "nonlinear"), default=None)
    f.add_argument("--class", dest="asset_class", default=None, help="fit only this asset class")
    f.add_argument("--max-iter", type=int, default=None)
    f.add_argument("--tol", type=float, default=None)
    f.add_argument("--n-starts", type=int, default=None)
    f.add_argument("--alternations", type=int, default=None)

    a = sub.add_parser("analyze", help="regressions, distortion statistics, Gordon value")
    common(a)
    a.add_argument("--input", required=True, help="CSV with p|log_price and v|v_smooth columns")
    a.add_argument("--alpha", type=float, default=1.0 / 7.0)
    a.add_argument("--bins", type=int, default=50)
    a.add_argument("--silverman-k", type=int, nargs="*", default=[1, 2])
    a.add_argument("--B", type=int, default=500)
    a.add_argument("--thin", type=int, default=10)
    a.add_argument("--gordon", action="store_true", help="require a Gordon benchmark")
    a.add_argument("--dividends", help="CSV with a dividend column (optional date column)")
    a.add_argument("--discount", type=float, default=0.068)
    a.add_argument("--growth", type=float, default=0.022)
    a.add_argument("--periods-per-year", type=int, default=1)

    r = sub.add_parser("report", help="summarise the JSON outputs of a run directory")
    common(r)
    r.add_argument("--run-dir", required=True)

    rr = sub.add_parser("rerun", help="replay a run manifest")
    rr.add_argument("manifest")
    rr.add_argument("--out", default=None, help="write to this directory instead")
    rr.add_argument("--workers", type=int, default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    workers = args.workers or default_workers()
    try:
        if args.command == "rerun":
            man = RunManifest.read(args.manifest)
            if args.out:
                man.output_dir = str(Path(args.out).resolve())
        else:
            man = manifest_from_args(args)
    except (UsageError, OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return execute(man, workers)


if __name__ == "__main__":
    sys.exit(main())
