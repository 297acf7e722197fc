"""Command-line interface: ``haldose fit|curve|simulate|grid-scan``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 experiment
flagged for too many failed replications.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import re
import sys
import tempfile
from pathlib import Path

import numpy as np

from .baselines import PolyError
from .basis import BasisError
from .inference import InferenceError, delta_ci
from .model import HalModel, fit_hal
from .selection import HalConfig, SelectionError
from .simulation import (DEFAULT_GRID, METRICS, SCAN_POINTS, EstimatorSpec, SpecError,
                         grid_scan, run_experiment)
from .solver import SolverError
from .svg import Panel, Series, render

log = logging.getLogger("haldose")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_FLAGGED = 0, 2, 3, 4
REPORT_COLUMNS = ("dgd", "n", "estimator", "a") + METRICS + ("failures",)
CURVE_COLUMNS = ("a", "psi", "se", "ci_lo", "ci_hi")
SCAN_COLUMNS = ("lambda", "a") + METRICS + ("near_lambda_cv", "near_lambda_u")
_W_RE = re.compile(r"^W(\d+)$")


class InputError(ValueError):
    pass


# ---- input -----------------------------------------------------------------

def read_dataset(path, need_y: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Read W1..Wk, A and (optionally) Y from a headed CSV file."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise InputError(f"{path} is not UTF-8 text") from None
    if not rows:
        raise InputError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise InputError(f"{path}: duplicate column names")
    w_cols = sorted((int(m.group(1)), i) for i, h in enumerate(header) if (m := _W_RE.match(h)))
    required = ["A"] + (["Y"] if need_y else [])
    missing = [c for c in required if c not in header]
    if not w_cols:
        missing.insert(0, "W1")
    if missing:
        raise InputError(f"{path}: missing column(s) {', '.join(missing)}")
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if not body:
        raise InputError(f"{path}: no data rows")
    values = np.empty((len(body), len(header)))
    for ln, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise InputError(f"{path}: row {ln} has {len(r)} fields, expected {len(header)}")
        for j, cell in enumerate(r):
            try:
                v = float(cell)
            except ValueError:
                raise InputError(f"{path}: row {ln}, column {header[j]}: not a number: {cell!r}") from None
            if not math.isfinite(v):
                raise InputError(f"{path}: row {ln}, column {header[j]}: missing or non-finite value")
            values[ln - 2, j] = v
    W = values[:, [i for _, i in w_cols]]
    A = values[:, header.index("A")]
    Y = values[:, header.index("Y")] if "Y" in header else None
    return W, A, Y


def parse_grid(text: str) -> np.ndarray:
    """``start:stop:step`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0 or stop < start:
                raise InputError("grid needs step > 0 and stop >= start")
            k = int(math.floor((stop - start) / step + 1e-9))
            return np.round(start + step * np.arange(k + 1), 10)
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"cannot parse grid {text!r}") from None
    if not vals or not all(math.isfinite(v) for v in vals):
        raise InputError(f"cannot parse grid {text!r}")
    return np.asarray(vals)


def parse_floats(text: str, what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"cannot parse {what} {text!r}") from None
    if not vals:
        raise InputError(f"empty {what}")
    return vals


def parse_ints(text: str, what: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"cannot parse {what} {text!r}") from None
    if not vals:
        raise InputError(f"empty {what}")
    return vals


def load_config(path, overrides: dict) -> HalConfig:
    d = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise InputError(f"{path}: config must be a JSON object")
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return HalConfig.from_dict(d)
    except TypeError as exc:
        raise InputError(f"invalid config: {exc}") from None
    except SelectionError as exc:
        raise InputError(f"invalid config: {exc}") from None


# ---- output ----------------------------------------------------------------

def _atomic_write(path: Path, text: str, validate=None) -> None:
    """Write to a temporary sibling, validate it, then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        if validate is not None:
            validate(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def csv_validator(columns, numeric=()):
    def check(path: Path):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != tuple(columns):
            raise RuntimeError(f"{path.name}: header does not match the schema")
        for r in rows[1:]:
            if len(r) != len(columns):
                raise RuntimeError(f"{path.name}: malformed row")
            for c in numeric:
                float(r[columns.index(c)])
    return check


def json_validator(required):
    def check(path: Path):
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        missing = [k for k in required if k not in d]
        if missing:
            raise RuntimeError(f"{path.name}: missing keys {missing}")
    return check


def write_json(path: Path, obj, required=()) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, allow_nan=False) + "\n", json_validator(required))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ---- commands --------------------------------------------------------------

def cmd_fit(args) -> int:
    W, A, Y = read_dataset(args.data)
    overrides = {"order": args.order, "selector": args.selector, "max_knots_per_dim": args.knots,
                 "seed": args.seed}
    if overrides["order"] is not None and overrides["order"] != "adaptive":
        overrides["order"] = int(overrides["order"])
    family = args.family
    if family == "auto":
        family = "binomial" if np.all((Y == 0) | (Y == 1)) else "gaussian"
    overrides["family"] = family
    config = load_config(args.config, overrides)
    if config.family == "binomial" and not np.all((Y == 0) | (Y == 1)):
        raise InputError(f"{args.data}: column Y must be 0/1 for the binomial family")
    model = fit_hal(W, A, Y, config)
    text = json.dumps(_jsonable(model.to_dict())) + "\n"
    _atomic_write(Path(args.out), text, json_validator(("schema_version", "bases", "beta", "scaler")))
    sel = model.selection
    print(f"lambda_cv    {sel.lambda_cv:.6g}")
    print(f"lambda_final {sel.lambda_final:.6g}")
    print(f"l1_norm      {model.fit.l1_norm:.6g}")
    print(f"active       {len(model.fit.active)}")
    print(f"order        {sel.chosen_config.order}")
    if sel.warning:
        print(f"warning      {sel.warning}")
    return EXIT_OK


def _load_model(path) -> HalModel:
    try:
        return HalModel.load(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: not a valid model file ({exc})") from None


def curve_svg(curve, title: str) -> str:
    series = Series(list(curve.grid), list(curve.psi), list(curve.ci_lo), list(curve.ci_hi),
                    label=f"estimate, {100 * (1 - curve.alpha):g}% CI")
    return render([Panel([series], title, "treatment a", "psi(a)")], width=560, height=380)


def cmd_curve(args) -> int:
    model = _load_model(args.model)
    W = None
    if args.data:
        W, _, _ = read_dataset(args.data, need_y=False)
        if W.shape[1] != model.W.shape[1]:
            raise InputError(f"{args.data}: expected {model.W.shape[1]} W columns, got {W.shape[1]}")
    grid = parse_grid(args.grid) if args.grid else np.linspace(*model.treatment_range, 26)
    lo, hi = model.treatment_range
    if np.any(grid < lo) or np.any(grid > hi):
        log.warning("grid values outside the training treatment range [%g, %g] were clipped", lo, hi)
        grid = np.clip(grid, lo, hi)
    if not 0.0 < args.alpha < 1.0:
        raise InputError("alpha must lie in (0, 1)")
    curve, _ = delta_ci(model, grid, args.alpha, W)
    out = Path(args.out_dir)
    rows = [dict(zip(CURVE_COLUMNS, r)) for r in curve.rows()]
    _atomic_write(out / "curve.csv", csv_text(CURVE_COLUMNS, rows),
                  csv_validator(CURVE_COLUMNS, CURVE_COLUMNS))
    _atomic_write(out / "curve.svg", curve_svg(curve, "Estimated dose-response curve"))
    print(f"wrote {out / 'curve.csv'} and {out / 'curve.svg'} ({len(rows)} points)")
    return EXIT_OK


def report_svg(report) -> str:
    panels = []
    series = [Series(list(report.grid), list(report.truth), label="truth", color="#000000")]
    for k, (name, s) in enumerate(report.estimators.items()):
        if len(s.estimates) == 0:
            continue
        mean = s.estimates.mean(axis=0)
        sd = s.metrics["oracle_se"]
        series.append(Series(list(report.grid), list(mean), list(mean - 1.96 * sd),
                             list(mean + 1.96 * sd), label=f"{name} (oracle band)"))
    panels.append(Panel(series, f"DGD {report.dgd}, n={report.n}", "treatment a", "psi(a)"))
    for metric, label in (("cov_delta", "delta coverage"), ("cov_oracle", "oracle coverage"),
                          ("abs_bias", "|bias|")):
        ser = [Series(list(report.grid), list(s.metrics[metric]), label=name)
               for name, s in report.estimators.items() if s.metrics]
        if ser:
            panels.append(Panel(ser, label, "treatment a", label))
    return render(panels, columns=2)


def cmd_simulate(args) -> int:
    dgds = parse_ints(args.dgd, "dgd list")
    ns = parse_ints(args.n, "sample sizes")
    names = [e.strip() for e in args.estimators.split(",") if e.strip()]
    for name in names:
        EstimatorSpec.parse(name)
    grid = parse_grid(args.grid) if args.grid else np.asarray(DEFAULT_GRID)
    if args.reps < 2:
        raise InputError("--reps must be >= 2")
    if any(n < 20 for n in ns):
        raise InputError("--n must be >= 20")
    out = Path(args.out)
    rows, summaries, flagged = [], [], False
    for dgd in dgds:
        for n in ns:
            report = run_experiment(dgd, n, args.reps, names, grid, args.seed, args.alpha, args.jobs,
                                    args.n_mc)
            rows.extend(report.rows())
            summaries.append(report.summary())
            flagged |= report.flagged
            _atomic_write(out / f"figure_dgd{dgd}_n{n}.svg", report_svg(report))
    _atomic_write(out / "report.csv", csv_text(REPORT_COLUMNS, rows),
                  csv_validator(REPORT_COLUMNS, ("dgd", "n", "a", "failures")))
    write_json(out / "summary.json", _jsonable({"seed": args.seed, "estimators": names,
                                                "experiments": summaries, "flagged": flagged}),
               ("experiments", "flagged"))
    print(f"wrote {out / 'report.csv'} ({len(rows)} rows) and {out / 'summary.json'}")
    if flagged:
        print("experiment flagged: more than 5% of replications failed", file=sys.stderr)
        return EXIT_FLAGGED
    return EXIT_OK


def scan_svg(result) -> str:
    panels = []
    cv, u = float(np.median(result.lambda_cv)), float(np.median(result.lambda_u))
    marks = [(cv, "#1f77b4"), (u, "#ff7f0e")]
    lam = list(result.lambdas)
    for k, a in enumerate(result.points):
        for metric, label in (("mean_delta_se", "SE"), ("cov_delta", "coverage"), ("abs_bias", "|bias|")):
            ser = [Series(lam, [m[metric][k] for m in result.metrics], label="delta" if metric != "abs_bias" else "")]
            if metric == "mean_delta_se":
                ser.append(Series(lam, [m["oracle_se"][k] for m in result.metrics], label="oracle"))
            if metric == "cov_delta":
                ser.append(Series(lam, [m["cov_oracle"][k] for m in result.metrics], label="oracle"))
            panels.append(Panel(ser, f"a={a:g}: {label}", "lambda", label, marks, logx=True))
    return render(panels, columns=3, width=330, height=240)


def _nearest(lambdas, value) -> int:
    return int(np.argmin(np.abs(np.log(lambdas) - math.log(value))))


def cmd_grid_scan(args) -> int:
    lambdas = np.asarray(parse_floats(args.lambdas, "lambda grid")) if args.lambdas else None
    if lambdas is not None:
        if np.any(lambdas <= 0):
            raise InputError("lambda grid values must be positive")
        if np.any(np.diff(lambdas) >= 0):
            raise InputError("lambda grid must be strictly decreasing")
    points = np.asarray(parse_floats(args.points, "points")) if args.points else np.asarray(SCAN_POINTS)
    if args.reps < 2:
        raise InputError("--reps must be >= 2")
    result = grid_scan(args.dgd, args.n, args.reps, lambdas, points, args.seed, args.alpha, args.jobs,
                       args.knots, args.n_mc)
    i_cv = _nearest(result.lambdas, float(np.median(result.lambda_cv)))
    i_u = _nearest(result.lambdas, float(np.median(result.lambda_u)))
    rows = []
    for row in result.rows():
        i = int(np.flatnonzero(result.lambdas == row["lambda"])[0])
        row["near_lambda_cv"] = int(i == i_cv)
        row["near_lambda_u"] = int(i == i_u)
        rows.append(row)
    out = Path(args.out)
    _atomic_write(out / "scan.csv", csv_text(SCAN_COLUMNS, rows),
                  csv_validator(SCAN_COLUMNS, ("lambda", "a")))
    write_json(out / "scan.json", _jsonable(result.summary()), ("lambda_cv", "lambda_u", "lambdas"))
    _atomic_write(out / "scan.svg", scan_svg(result))
    print(f"wrote {out / 'scan.csv'} ({len(rows)} rows); median lambda_cv "
          f"{np.median(result.lambda_cv):.4g}, median lambda_u {np.median(result.lambda_u):.4g}")
    return EXIT_OK


# ---- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="haldose", description="HAL plug-in dose-response estimation")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a HAL model to a CSV dataset")
    f.add_argument("data", help="CSV with columns W1..Wk, A, Y")
    f.add_argument("--config", help="JSON object of estimator settings")
    f.add_argument("--out", default="model.json")
    f.add_argument("--order", choices=["0", "1", "adaptive"])
    f.add_argument("--selector", choices=["cv", "undersmooth"])
    f.add_argument("--knots", type=int, help="knots per dimension")
    f.add_argument("--family", choices=["auto", "gaussian", "binomial"], default="auto")
    f.add_argument("--seed", type=int)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("curve", help="dose-response curve and intervals from a fitted model")
    c.add_argument("model")
    c.add_argument("data", nargs="?", help="CSV whose W columns are averaged over (default: training W)")
    c.add_argument("--grid", help="start:stop:step or comma list (default: 26 points over the A range)")
    c.add_argument("--alpha", type=float, default=0.05)
    c.add_argument("--out-dir", default=".")
    c.set_defaults(func=cmd_curve)

    s = sub.add_parser("simulate", help="Monte Carlo experiment on the simulation DGDs")
    s.add_argument("--dgd", default="1", help="comma list of DGD ids (1-4)")
    s.add_argument("--n", default="1000", help="comma list of sample sizes")
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--estimators", default="hal1-cv,hal1-u",
                   help="comma list, e.g. hal0-cv,hal1-u,halA-u:k=25,poly3")
    s.add_argument("--grid", help="evaluation grid (default 0:5:0.2)")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--n-mc", type=int, default=10_000_000, help="Monte Carlo draws for the truth")
    s.add_argument("--out", default="sim-out")
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("grid-scan", help="first-order HAL over a fixed penalty grid")
    g.add_argument("--dgd", type=int, default=3)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--reps", type=int, default=100)
    g.add_argument("--lambdas", help="comma list, strictly decreasing")
    g.add_argument("--points", help="comma list of treatment values (default 0.4,1.0,1.4,2.6,4.2)")
    g.add_argument("--knots", type=int, help="knots per dimension")
    g.add_argument("--alpha", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--n-mc", type=int, default=10_000_000)
    g.add_argument("--out", default="scan-out")
    g.set_defaults(func=cmd_grid_scan)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    if getattr(args, "n_mc", 10 ** 5) < 10 ** 5:
        print("error: --n-mc must be >= 100000", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (InputError, SpecError, BasisError, SelectionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SolverError, InferenceError, PolyError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
