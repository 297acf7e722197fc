"""Penalty and smoothness-order selection for HAL fits.

Three selectors live here: K-fold cross-validation over a shared lambda path,
the undersmoothing walk that lowers lambda until the empirical scores of the
fitted basis functions are small relative to ``sd(residual) / (sqrt(n) log n)``,
and a discrete super learner over spline order / knot configurations.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .basis import DesignMatrix, build_design, generate_knots
from .solver import (Family, HalFit, PROB_CLIP, SolverError, _prepare, _fit_prepared,
                     lambda_path)

log = logging.getLogger(__name__)

SELECTORS = ("cv", "undersmooth")
HINGE_UNITS = ("original", "unit")


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class HalConfig:
    """Estimator settings.

    ``order`` is 0, 1 or ``"adaptive"``. For a fixed order,
    ``max_knots_per_dim=None`` means the order's default (all observed points
    for order 0, 20 for order 1). The adaptive candidates take their knot
    counts from ``adaptive_knots`` (order 0, order 1). ``hinge_units``
    says whether first-order hinges are measured in the covariates' original
    units or on the unit cube; it changes which fits a given lambda selects.
    """

    order: int | str = "adaptive"
    max_knots_per_dim: int | None = None
    max_degree: int | None = None
    n_lambda: int = 100
    lambda_ratio: float = 1e-4
    folds: int = 10
    selector: str = "cv"
    family: str = "gaussian"
    seed: int = 0
    adaptive_knots: tuple = (None, 20)
    score_all_bases: bool = False
    hinge_units: str = "original"
    cv_patience: int | None = 10

    def __post_init__(self):
        if self.order not in (0, 1, "adaptive"):
            raise SelectionError(f"order must be 0, 1 or 'adaptive', got {self.order!r}")
        if self.folds < 2:
            raise SelectionError("folds must be >= 2")
        if self.n_lambda < 2:
            raise SelectionError("n_lambda must be >= 2")
        if not 0.0 < self.lambda_ratio < 1.0:
            raise SelectionError("lambda_ratio must lie in (0, 1)")
        if self.selector not in SELECTORS:
            raise SelectionError(f"selector must be one of {SELECTORS}, got {self.selector!r}")
        if self.cv_patience is not None and self.cv_patience < 1:
            raise SelectionError("cv_patience must be >= 1 or None")
        if self.hinge_units not in HINGE_UNITS:
            raise SelectionError(f"hinge_units must be one of {HINGE_UNITS}, got {self.hinge_units!r}")
        if self.max_knots_per_dim is not None and self.max_knots_per_dim < 1:
            raise SelectionError("max_knots_per_dim must be >= 1")
        Family.get(self.family)

    def candidates(self) -> list["HalConfig"]:
        if self.order != "adaptive":
            return [self]
        k0, k1 = self.adaptive_knots
        return [replace(self, order=0, max_knots_per_dim=k0),
                replace(self, order=1, max_knots_per_dim=k1)]

    @property
    def label(self) -> str:
        k = "default" if self.max_knots_per_dim is None else str(self.max_knots_per_dim)
        return f"order{self.order}-k{k}"

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["adaptive_knots"] = list(self.adaptive_knots)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HalConfig":
        d = dict(d)
        if "adaptive_knots" in d:
            d["adaptive_knots"] = tuple(d["adaptive_knots"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SelectionError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def make_folds(n: int, k: int, seed: int, y=None) -> np.ndarray:
    """Fold label per observation; stratified on ``y`` when given.

    A deterministic function of ``(seed, n, k)`` (and the class pattern of
    ``y``).
    """
    if k < 2:
        raise SelectionError("need at least 2 folds")
    if n < k:
        raise SelectionError(f"cannot split {n} observations into {k} folds")
    rng = np.random.default_rng([seed, n, k])
    folds = np.empty(n, dtype=int)
    if y is None:
        folds[rng.permutation(n)] = np.arange(n) % k
        return folds
    y = np.asarray(y)
    offset = 0
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        folds[idx[rng.permutation(len(idx))]] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    return folds


def heldout_loss(family: Family, y, eta) -> np.ndarray:
    if family.kind == "gaussian":
        return (y - eta) ** 2
    p = np.clip(family.response(eta), PROB_CLIP, 1 - PROB_CLIP)
    return -(y * np.log(p) + (1 - y) * np.log1p(-p))


@dataclass
class CvResult:
    lambdas: np.ndarray
    risks: np.ndarray
    index: int
    nonconverged: int = 0

    @property
    def lambda_cv(self) -> float:
        return float(self.lambdas[self.index])

    @property
    def min_risk(self) -> float:
        return float(self.risks[self.index])


def pick_min_risk(risks) -> int:
    """Index of the smallest risk; ties go to the earliest (largest lambda)."""
    risks = np.asarray(risks, dtype=float)
    return int(np.flatnonzero(risks == np.nanmin(risks))[0])


def cv_select(design, y, family, lambdas, folds, patience: int | None = None) -> CvResult:
    """K-fold CV risk along a shared decreasing path.

    ``folds`` is a fold label per row (see :func:`make_folds`). Held-out risk is
    squared error or log-loss, pooled over all held-out rows. With
    ``patience`` set, the folds stop once that many consecutive penalties fail
    to improve on the best risk; skipped penalties get risk NaN.
    """
    X, y, family = _prepare(design, y, family)
    folds = np.asarray(folds)
    n = len(y)
    labels = np.unique(folds)
    if n < 2 * len(labels) and len(labels) != n:
        raise SelectionError(f"n={n} is too small for {len(labels)}-fold CV")
    if patience is not None and patience < 1:
        raise SelectionError("patience must be >= 1")
    states = []
    for k in labels:
        test = folds == k
        train = ~test
        if family.kind == "binomial":
            if np.unique(y[test]).size < 2 or np.unique(y[train]).size < 2:
                raise SelectionError(f"fold {k} has a constant outcome; stratification failed")
        Xtr = np.asfortranarray(X[train])
        states.append([test, Xtr, Xtr * Xtr, y[train], None])
    risks = np.full(len(lambdas), np.nan)
    bad = 0
    best = 0
    for li, lam in enumerate(lambdas):
        total = 0.0
        for st in states:
            test, Xtr, Xtr2, ytr, beta = st
            fit = _fit_prepared(Xtr, Xtr, Xtr2, ytr, family, lam, beta, {})
            bad += not fit.converged
            st[4] = fit.beta
            s_ = fit.support()
            total += heldout_loss(family, y[test], X[np.ix_(test, s_)] @ fit.beta[s_]).sum()
        risks[li] = total / n
        if risks[li] < risks[best]:
            best = li
        if patience is not None and li - best >= patience:
            break
    return CvResult(np.asarray(lambdas, dtype=float), risks, pick_min_risk(risks), bad)


@dataclass
class ScoreStep:
    lam: float
    max_score: float
    threshold: float
    n_active: int
    converged: bool


@dataclass
class UndersmoothResult:
    lambda_u: float
    index: int
    fit: HalFit | None
    trace: list[ScoreStep] = field(default_factory=list)
    warning: str | None = None


def undersmooth_threshold(sigma: float, n: int) -> float:
    return sigma / (math.sqrt(n) * math.log(n))


def score_criterion(fit: HalFit, X, y, all_bases: bool = False) -> tuple[float, float, int]:
    """(max |score|, threshold, active size) for one fit on training data."""
    eta = X[:, fit.support()] @ fit.beta[fit.support()]
    r = y - fit.family.response(eta)
    cols = np.arange(1, X.shape[1]) if all_bases else fit.active
    n = len(y)
    max_score = float(np.max(np.abs(X[:, cols].T @ r)) / n) if len(cols) else 0.0
    sigma = float(np.std(r, ddof=1))
    return max_score, undersmooth_threshold(sigma, n), len(fit.active)


def undersmooth_select(design, y, family, lambdas, index_cv: int, fits=None,
                       all_bases: bool = False) -> UndersmoothResult:
    """Walk down the path from the CV choice until the score criterion holds.

    ``fits`` may hold already-computed full-data fits for ``lambdas[:len(fits)]``
    (warm starts continue from the last one). Returns the first (largest)
    ``lambda <= lambda_cv`` whose active-set scores satisfy
    ``max |P_n phi_j r| <= sd(r) / (sqrt(n) log n)``; falls back to the smallest
    path value when none does.
    """
    X, y, family = _prepare(design, y, family)
    X2 = X * X
    fits = list(fits or [])
    trace: list[ScoreStep] = []
    saw_active = False

    def fit_at(i):
        while len(fits) <= i:
            beta = fits[-1].beta if fits else None
            fits.append(_fit_prepared(design, X, X2, y, family, lambdas[len(fits)], beta, {}))
        return fits[i]

    for i in range(index_cv, len(lambdas)):
        fit = fit_at(i)
        max_score, thr, n_active = score_criterion(fit, X, y, all_bases)
        trace.append(ScoreStep(float(lambdas[i]), max_score, thr, n_active, fit.converged))
        if not fit.converged or n_active == 0:
            continue
        saw_active = True
        if max_score <= thr:
            return UndersmoothResult(float(lambdas[i]), i, fit, trace)
    if not saw_active:
        return UndersmoothResult(float(lambdas[index_cv]), index_cv, fit_at(index_cv), trace,
                                 warning="empty active set along the path; keeping lambda_cv")
    last = len(lambdas) - 1
    return UndersmoothResult(float(lambdas[last]), last, fit_at(last), trace,
                             warning="criterion not met on the path; using the smallest lambda")


@dataclass
class Candidate:
    config: HalConfig
    design: DesignMatrix
    lambdas: np.ndarray
    cv: CvResult

    @property
    def risk(self) -> float:
        return self.cv.min_risk


def build_candidate_design(X_scaled, config: HalConfig, spans=None) -> DesignMatrix:
    """Design for one candidate; ``spans`` are the original coordinate ranges."""
    if config.order == "adaptive":
        raise SelectionError("resolve the adaptive order before building a design")
    if config.hinge_units == "unit":
        spans = None
    bases = generate_knots(X_scaled, config.order, config.max_knots_per_dim, config.max_degree,
                           spans)
    return build_design(X_scaled, bases)


def evaluate_candidate(X_scaled, y, config: HalConfig, folds, spans=None) -> Candidate:
    design = build_candidate_design(X_scaled, config, spans)
    lambdas = lambda_path(design, y, config.family, config.n_lambda, config.lambda_ratio)
    cv = cv_select(design, y, config.family, lambdas, folds, config.cv_patience)
    return Candidate(config, design, lambdas, cv)


def _knots_key(c: Candidate) -> float:
    k = c.config.max_knots_per_dim
    return math.inf if k is None else k


def discrete_super_learner(candidates: list[Candidate]) -> int:
    """Index of the candidate with the lowest CV risk.

    Ties go to the lower spline order, then to fewer knots.
    """
    if len(candidates) < 2:
        raise SelectionError("the discrete super learner needs at least two candidates")
    return min(range(len(candidates)),
               key=lambda i: (candidates[i].risk, candidates[i].config.order, _knots_key(candidates[i])))


@dataclass
class SelectionResult:
    chosen_config: HalConfig
    lambda_cv: float
    lambda_final: float
    lambdas: np.ndarray
    cv_risks: dict[str, list[float]]
    criterion_trace: list[ScoreStep] = field(default_factory=list)
    warning: str | None = None

    def to_dict(self) -> dict:
        return {
            "chosen_config": self.chosen_config.to_dict(),
            "lambda_cv": self.lambda_cv,
            "lambda_final": self.lambda_final,
            "lambdas": [float(v) for v in self.lambdas],
            "cv_risks": {k: [None if np.isnan(v) else float(v) for v in r]
                         for k, r in self.cv_risks.items()},
            "criterion_trace": [vars(s) for s in self.criterion_trace],
            "warning": self.warning,
        }


def evaluate_candidates(X_scaled, y, config: HalConfig, spans=None) -> tuple[Candidate, dict]:
    """Cross-validate every candidate configuration; returns the winner and all risks."""
    family = Family.get(config.family)
    y = family.validate(y)
    n = len(y)
    if n < 2 * config.folds:
        raise SelectionError(f"n={n} is too small for {config.folds}-fold CV")
    folds = make_folds(n, config.folds, config.seed, y if family.kind == "binomial" else None)
    cands = [evaluate_candidate(X_scaled, y, c, folds, spans) for c in config.candidates()]
    best = cands[discrete_super_learner(cands)] if len(cands) > 1 else cands[0]
    return best, {c.config.label: list(c.cv.risks) for c in cands}


def finalize(best: Candidate, y, risks: dict, selectors=SELECTORS,
             all_bases: bool = False) -> dict[str, tuple[SelectionResult, HalFit]]:
    """Full-data fits for each requested selector, sharing one warm-started path."""
    family = Family.get(best.config.family)
    X, y, family = _prepare(best.design, y, family)
    X2 = X * X
    fits: list[HalFit] = []
    beta = None
    for lam in best.lambdas[: best.cv.index + 1]:
        fits.append(_fit_prepared(best.design, X, X2, y, family, lam, beta, {}))
        beta = fits[-1].beta
    lam_cv = best.cv.lambda_cv
    out = {}
    for selector in selectors:
        if selector not in SELECTORS:
            raise SelectionError(f"selector must be one of {SELECTORS}, got {selector!r}")
        chosen = replace(best.config, selector=selector)
        if selector == "cv":
            final = fits[best.cv.index]
            result = SelectionResult(chosen, lam_cv, lam_cv, best.lambdas, risks)
        else:
            us = undersmooth_select(best.design, y, family, best.lambdas, best.cv.index, fits,
                                    all_bases)
            final = us.fit
            result = SelectionResult(chosen, lam_cv,
                                     us.lambda_u, best.lambdas, risks, us.trace, us.warning)
        if not final.converged:
            log.warning("final fit did not converge at lambda=%.4g", final.lam)
        out[selector] = (result, final)
    return out


def select(X_scaled, y, config: HalConfig, spans=None) -> tuple[Candidate, SelectionResult, HalFit]:
    """Resolve order/knots, choose lambda, and return the final full-data fit."""
    best, risks = evaluate_candidates(X_scaled, y, config, spans)
    result, final = finalize(best, y, risks, (config.selector,), config.score_all_bases)[config.selector]
    return best, result, final
