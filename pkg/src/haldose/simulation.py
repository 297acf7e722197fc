"""Replicated estimation experiments on the simulation distributions.

Replication ``r`` of (dgd, n) draws its data from
``SeedSequence(master_seed, spawn_key=(dgd, n, r))``, so results do not
depend on worker count or scheduling.
"""
from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baselines import fit_poly, poly_curve
from .dgd import generate, true_curve
from .inference import delta_ci, z_quantile
from .model import HalModel, fit_hal_selectors, prepare_inputs
from .selection import HalConfig, build_candidate_design, evaluate_candidates, finalize
from .solver import fit_path

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(0.2 * k, 10) for k in range(26))
SCAN_POINTS = (0.4, 1.0, 1.4, 2.6, 4.2)
FAILURE_LIMIT = 0.05
METRICS = ("abs_bias", "oracle_se", "mse", "bias_se_delta", "bias_se_oracle",
           "cov_delta", "cov_oracle", "mean_delta_se")

_SPEC_RE = re.compile(r"^(?:hal(?P<order>[01A])-(?P<sel>cv|u)|poly(?P<deg>\d+))(?P<opts>(?::[a-z0-9]+=[^:]+)*)$")
_SELECTOR = {"cv": "cv", "u": "undersmooth"}


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorSpec:
    """Parsed estimator name such as ``hal1-u``, ``halA-cv:k=25`` or ``poly3``.

    Options: ``k`` sets the knots per dimension (the order-0 candidate for
    adaptive fits), ``k1`` the order-1 candidate's knots.
    """

    name: str
    kind: str  # "hal" or "poly"
    order: int | str | None = None
    selector: str | None = None
    degree: int | None = None
    knots: int | None = None
    knots1: int | None = None

    @classmethod
    def parse(cls, text: str) -> "EstimatorSpec":
        m = _SPEC_RE.match(text.strip())
        if not m:
            raise SpecError(f"unrecognised estimator {text!r}; expected hal0|hal1|halA-cv|u or polyK")
        opts = {}
        for part in filter(None, m.group("opts").split(":")):
            key, _, value = part.partition("=")
            if key not in ("k", "k1"):
                raise SpecError(f"unknown estimator option {key!r} in {text!r}")
            try:
                opts[key] = int(value)
            except ValueError:
                raise SpecError(f"option {key} needs an integer in {text!r}") from None
            if opts[key] < 1:
                raise SpecError(f"option {key} must be >= 1 in {text!r}")
        if m.group("deg"):
            if opts:
                raise SpecError(f"polynomial estimators take no options: {text!r}")
            degree = int(m.group("deg"))
            if degree < 1:
                raise SpecError("polynomial degree must be >= 1")
            return cls(text.strip(), "poly", degree=degree)
        order = "adaptive" if m.group("order") == "A" else int(m.group("order"))
        if "k1" in opts and order != "adaptive":
            raise SpecError(f"option k1 only applies to adaptive fits: {text!r}")
        return cls(text.strip(), "hal", order, _SELECTOR[m.group("sel")],
                   knots=opts.get("k"), knots1=opts.get("k1"))

    def hal_config(self, seed: int) -> HalConfig:
        if self.order == "adaptive":
            k1 = 20 if self.knots1 is None else self.knots1
            return HalConfig(order="adaptive", adaptive_knots=(self.knots, k1), selector=self.selector,
                             family="binomial", seed=seed)
        return HalConfig(order=self.order, max_knots_per_dim=self.knots, selector=self.selector,
                         family="binomial", seed=seed)

    @property
    def group(self):
        # estimators that can share one cross-validation run
        return (self.order, self.knots, self.knots1) if self.kind == "hal" else self.name


@dataclass
class RepResult:
    rep: int
    psi: dict[str, np.ndarray] = field(default_factory=dict)
    se: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, dict] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)


def rep_seeds(master_seed: int, dgd_id: int, n: int, rep: int) -> tuple[np.random.SeedSequence, int]:
    """Data seed sequence and an integer fold seed for one replication."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(dgd_id, n, rep))
    return ss, int(ss.generate_state(1)[0])


def _run_rep(args) -> RepResult:
    dgd_id, n, rep, specs, grid, master_seed, alpha = args
    ss, fold_seed = rep_seeds(master_seed, dgd_id, n, rep)
    data = generate(dgd_id, n, ss)
    out = RepResult(rep)
    groups: dict = {}
    for spec in specs:
        groups.setdefault(spec.group, []).append(spec)
    for members in groups.values():
        first = members[0]
        try:
            if first.kind == "poly":
                model = fit_poly(data.W, data.A, data.Y, first.degree, "binomial")
                curve, _ = poly_curve(model, grid, alpha)
                out.psi[first.name], out.se[first.name] = curve.psi, curve.se
                out.meta[first.name] = {}
                continue
            selectors = tuple(dict.fromkeys(s.selector for s in members))
            models = fit_hal_selectors(data.W, data.A, data.Y, first.hal_config(fold_seed), selectors)
            for spec in members:
                model = models[spec.selector]
                curve, _ = delta_ci(model, grid, alpha)
                sel = model.selection
                out.psi[spec.name], out.se[spec.name] = curve.psi, curve.se
                out.meta[spec.name] = {"order": sel.chosen_config.order, "lambda_cv": sel.lambda_cv,
                                       "lambda_final": sel.lambda_final,
                                       "converged": bool(model.fit.converged)}
        except Exception as exc:  # a failed replication is recorded, not fatal
            for spec in members:
                out.errors[spec.name] = f"{type(exc).__name__}: {exc}"
    return out


def map_reps(fn, tasks, jobs: int = 1) -> list:
    """Apply ``fn`` to every task; results come back in task order."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def compute_metrics(est, delta_se, truth, alpha: float = 0.05) -> dict[str, np.ndarray]:
    """Per-point metrics from an (n_reps x G) table of estimates and delta SEs.

    The oracle SE is the sample SD (n - 1 divisor) of the estimates; bias/SE
    ratios use ``|bias|`` over the mean delta SE or the oracle SE.
    """
    est = np.atleast_2d(np.asarray(est, dtype=float))
    delta_se = np.atleast_2d(np.asarray(delta_se, dtype=float))
    truth = np.asarray(truth, dtype=float)
    if est.shape[0] < 2:
        raise ValueError("metrics need at least 2 replications")
    z = z_quantile(alpha)
    err = est - truth
    abs_bias = np.abs(err.mean(axis=0))
    oracle_se = est.std(axis=0, ddof=1)
    mean_se = delta_se.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        bias_se_delta = np.where(mean_se > 0, abs_bias / mean_se, np.inf)
        bias_se_oracle = np.where(oracle_se > 0, abs_bias / oracle_se, np.inf)
    bias_se_delta = np.where(abs_bias == 0, 0.0, bias_se_delta)
    bias_se_oracle = np.where(abs_bias == 0, 0.0, bias_se_oracle)
    return {
        "abs_bias": abs_bias,
        "oracle_se": oracle_se,
        "mse": (err ** 2).mean(axis=0),
        "bias_se_delta": bias_se_delta,
        "bias_se_oracle": bias_se_oracle,
        "cov_delta": (np.abs(err) <= z * delta_se).mean(axis=0),
        "cov_oracle": (np.abs(err) <= z * oracle_se).mean(axis=0),
        "mean_delta_se": mean_se,
    }


@dataclass
class EstimatorSummary:
    estimator: str
    metrics: dict[str, np.ndarray]
    failures: int
    estimates: np.ndarray
    delta_se: np.ndarray
    meta: list[dict]

    def average(self) -> dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.metrics.items()}

    def order_frequency(self) -> dict[str, float]:
        orders = [m["order"] for m in self.meta if "order" in m]
        if not orders:
            return {}
        return {str(o): orders.count(o) / len(orders) for o in sorted(set(orders), key=str)}


@dataclass
class MonteCarloReport:
    dgd: int
    n: int
    n_reps: int
    grid: np.ndarray
    truth: np.ndarray
    master_seed: int
    alpha: float
    estimators: dict[str, EstimatorSummary]
    errors: list[dict]

    @property
    def flagged(self) -> bool:
        return any(s.failures > FAILURE_LIMIT * self.n_reps for s in self.estimators.values())

    def rows(self):
        """Flat rows following the report CSV schema."""
        for name, s in self.estimators.items():
            for k, a in enumerate(self.grid):
                row = {"dgd": self.dgd, "n": self.n, "estimator": name, "a": float(a)}
                for m in METRICS:
                    row[m] = float(s.metrics[m][k]) if s.metrics else math.nan
                row["failures"] = s.failures
                yield row

    def point(self, estimator: str, a: float) -> dict[str, float]:
        k = int(np.argmin(np.abs(self.grid - a)))
        if abs(self.grid[k] - a) > 1e-9:
            raise KeyError(f"a={a} is not on the evaluation grid")
        return {m: float(v[k]) for m, v in self.estimators[estimator].metrics.items()}

    def summary(self) -> dict:
        return {
            "dgd": self.dgd,
            "n": self.n,
            "n_reps": self.n_reps,
            "master_seed": self.master_seed,
            "alpha": self.alpha,
            "grid": [float(a) for a in self.grid],
            "truth": [float(v) for v in self.truth],
            "flagged": self.flagged,
            "estimators": {
                name: {
                    "failures": s.failures,
                    "average": s.average() if s.metrics else None,
                    "order_frequency": s.order_frequency(),
                    "replications": s.meta,
                }
                for name, s in self.estimators.items()
            },
            "errors": self.errors,
        }


def run_experiment(dgd_id: int, n: int, n_reps: int, estimators, grid=DEFAULT_GRID,
                   master_seed: int = 0, alpha: float = 0.05, jobs: int = 1,
                   n_mc: int = 10_000_000) -> MonteCarloReport:
    if n_reps < 2:
        raise ValueError("n_reps must be >= 2")
    specs = [e if isinstance(e, EstimatorSpec) else EstimatorSpec.parse(e) for e in estimators]
    if not specs:
        raise ValueError("no estimators given")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("duplicate estimator names")
    grid = np.asarray(grid, dtype=float)
    z_quantile(alpha)
    truth = true_curve(dgd_id, grid, n_mc).psi0
    tasks = [(dgd_id, n, r, specs, grid, master_seed, alpha) for r in range(n_reps)]
    reps = map_reps(_run_rep, tasks, jobs)

    summaries = {}
    errors = []
    for spec in specs:
        ok = [r for r in reps if spec.name not in r.errors]
        for r in reps:
            if spec.name in r.errors:
                errors.append({"rep": r.rep, "estimator": spec.name, "error": r.errors[spec.name]})
        est = np.array([r.psi[spec.name] for r in ok]).reshape(len(ok), len(grid))
        se = np.array([r.se[spec.name] for r in ok]).reshape(len(ok), len(grid))
        metrics = compute_metrics(est, se, truth, alpha) if len(ok) >= 2 else {}
        meta = [dict(rep=r.rep, **r.meta[spec.name]) for r in ok]
        summaries[spec.name] = EstimatorSummary(spec.name, metrics, n_reps - len(ok), est, se, meta)
    report = MonteCarloReport(dgd_id, n, n_reps, grid, truth, master_seed, alpha, summaries, errors)
    if report.flagged:
        log.warning("more than %.0f%% of replications failed", 100 * FAILURE_LIMIT)
    return report


@dataclass
class GridScanResult:
    dgd: int
    n: int
    n_reps: int
    lambdas: np.ndarray
    points: np.ndarray
    truth: np.ndarray
    alpha: float
    metrics: list[dict[str, np.ndarray]]  # one entry per lambda, arrays over points
    lambda_cv: np.ndarray
    lambda_u: np.ndarray
    failures: int

    def rows(self):
        for i, lam in enumerate(self.lambdas):
            for k, a in enumerate(self.points):
                row = {"lambda": float(lam), "a": float(a)}
                for m in METRICS:
                    row[m] = float(self.metrics[i][m][k])
                yield row

    def summary(self) -> dict:
        def stats(v):
            return {"median": float(np.median(v)), "min": float(np.min(v)), "max": float(np.max(v)),
                    "values": [float(x) for x in v]}

        return {"dgd": self.dgd, "n": self.n, "n_reps": self.n_reps, "alpha": self.alpha,
                "lambdas": [float(v) for v in self.lambdas],
                "points": [float(a) for a in self.points],
                "truth": [float(v) for v in self.truth],
                "lambda_cv": stats(self.lambda_cv), "lambda_u": stats(self.lambda_u),
                "failures": self.failures}


def default_scan_lambdas() -> np.ndarray:
    return np.geomspace(2e-2, 1e-4, 24)


def _scan_rep(args):
    dgd_id, n, rep, lambdas, points, master_seed, alpha, knots = args
    ss, fold_seed = rep_seeds(master_seed, dgd_id, n, rep)
    data = generate(dgd_id, n, ss)
    config = HalConfig(order=1, max_knots_per_dim=knots, family="binomial", seed=fold_seed)
    try:
        W, A, y, scaler = prepare_inputs(data.W, data.A, data.Y)
        X = scaler.transform(np.column_stack([W, A]))
        spans = np.asarray(scaler.maxs) - np.asarray(scaler.mins)
        best, risks = evaluate_candidates(X, y, config, spans)
        chosen = finalize(best, y, risks)
        lam_cv = chosen["cv"][0].lambda_cv
        lam_u = chosen["undersmooth"][0].lambda_final
        design = build_candidate_design(X, config, spans)
        psi = np.empty((len(lambdas), len(points)))
        se = np.empty_like(psi)
        for i, fit in enumerate(fit_path(design, y, "binomial", lambdas)):
            curve, _ = delta_ci(HalModel(scaler, fit, config, None, W, A, y), points, alpha)
            psi[i], se[i] = curve.psi, curve.se
        return psi, se, lam_cv, lam_u, None
    except Exception as exc:
        return None, None, math.nan, math.nan, f"{type(exc).__name__}: {exc}"


def grid_scan(dgd_id: int, n: int, n_reps: int, lambdas=None, points=SCAN_POINTS,
              master_seed: int = 0, alpha: float = 0.05, jobs: int = 1, knots: int | None = None,
              n_mc: int = 10_000_000) -> GridScanResult:
    """First-order HAL evaluated along a fixed penalty grid, with the selected penalties."""
    if n_reps < 2:
        raise ValueError("n_reps must be >= 2")
    lambdas = default_scan_lambdas() if lambdas is None else np.asarray(lambdas, dtype=float)
    if lambdas.ndim != 1 or lambdas.size == 0 or np.any(lambdas <= 0):
        raise ValueError("lambda grid must be a nonempty list of positive values")
    if np.any(np.diff(lambdas) >= 0):
        raise ValueError("lambda grid must be strictly decreasing")
    points = np.asarray(points, dtype=float)
    truth = true_curve(dgd_id, points, n_mc).psi0
    tasks = [(dgd_id, n, r, lambdas, points, master_seed, alpha, knots) for r in range(n_reps)]
    reps = map_reps(_scan_rep, tasks, jobs)
    ok = [r for r in reps if r[4] is None]
    if len(ok) < 2:
        raise RuntimeError("fewer than 2 grid-scan replications succeeded")
    psi = np.stack([r[0] for r in ok])
    se = np.stack([r[1] for r in ok])
    metrics = [compute_metrics(psi[:, i], se[:, i], truth, alpha) for i in range(len(lambdas))]
    return GridScanResult(dgd_id, n, n_reps, lambdas, points, truth, alpha, metrics,
                          np.array([r[2] for r in ok]), np.array([r[3] for r in ok]),
                          n_reps - len(ok))
