"""L1-penalized regression on a HAL design by cyclic coordinate descent.

Objective, with ``n`` training rows and an unpenalized intercept in column 0::

    (1/n) sum_i loss(y_i, eta_i) + lam * sum_{j >= 1} |beta_j|

gaussian loss is ``0.5 (y - eta)^2``; binomial loss is ``-y eta + log(1 + e^eta)``.
Columns are never standardized, so ``l1_norm(beta)`` is the sectional variation
norm of the fitted function.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .basis import DesignMatrix, l1_norm

log = logging.getLogger(__name__)

PROB_CLIP = 1e-5


class SolverError(ValueError):
    pass


class DegenerateOutcome(SolverError):
    pass


@dataclass(frozen=True)
class Family:
    kind: str

    def __post_init__(self):
        if self.kind not in ("gaussian", "binomial"):
            raise SolverError(f"unknown family {self.kind!r}")

    @classmethod
    def get(cls, family: "Family | str") -> "Family":
        return family if isinstance(family, Family) else cls(str(family))

    @property
    def link(self) -> str:
        return "identity" if self.kind == "gaussian" else "logit"

    def validate(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise SolverError("outcome contains non-finite values")
        if self.kind == "binomial" and not np.all((y == 0) | (y == 1)):
            raise SolverError("binomial family requires a 0/1 outcome")
        return y

    def response(self, eta):
        eta = np.asarray(eta, dtype=float)
        return eta if self.kind == "gaussian" else expit(eta)

    def response_derivative(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind == "gaussian":
            return np.ones_like(eta)
        p = expit(eta)
        return p * (1.0 - p)

    def mean_loss(self, y, eta) -> float:
        if self.kind == "gaussian":
            return float(0.5 * np.mean((y - eta) ** 2))
        return float(np.mean(np.logaddexp(0.0, eta) - y * eta))

    def __str__(self):
        return self.kind


GAUSSIAN = Family("gaussian")
BINOMIAL = Family("binomial")


def expit(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@njit(cache=True)
def _sweep(X, w, xwx, beta, r, lam, idx):
    """One pass of coordinate updates over ``idx``; returns the max |change|."""
    n = X.shape[0]
    maxd = 0.0
    for t in range(idx.shape[0]):
        j = idx[t]
        if xwx[j] <= 0.0:
            continue
        g = 0.0
        for i in range(n):
            g += w[i] * X[i, j] * r[i]
        g += xwx[j] * beta[j]
        if j == 0:
            new = g / xwx[j]
        elif g > lam:
            new = (g - lam) / xwx[j]
        elif g < -lam:
            new = (g + lam) / xwx[j]
        else:
            new = 0.0
        d = new - beta[j]
        if d != 0.0:
            for i in range(n):
                r[i] -= d * X[i, j]
            beta[j] = new
            ad = abs(d)
            if ad > maxd:
                maxd = ad
    return maxd


def _support(beta):
    idx = np.flatnonzero(beta)
    return idx if idx.size and idx[0] == 0 else np.concatenate([[0], idx])


class _GramCache:
    """Weighted Gram matrix over a column set, reused while the support stays inside it."""

    def __init__(self, X, w):
        self.X = X
        self.w = w
        self.cols = np.empty(0, dtype=int)

    def view(self, act):
        """Positions of ``act`` (sorted) within the cached columns, rebuilding if needed."""
        if not np.isin(act, self.cols, assume_unique=True).all():
            self.cols = act.copy()
            self.XA = self.X[:, act]
            self.XW = self.XA * self.w[:, None]
            self.G = self.XA.T @ self.XW
        return np.searchsorted(self.cols, act)


def _solve_on_support(X, w, beta, r, lam, cache=None):
    """Exact minimization over the current support by feature-sign search.

    Solves the quadratic with signs fixed; when the solution flips a sign, moves
    to the best zero-crossing on the segment, drops the zeroed coefficients and
    repeats. Works on the support Gram matrix only, so each step costs
    O(|support|^2) after one O(n |support|^2) setup.
    """
    act = _support(beta)
    if cache is None:
        cache = _GramCache(X, w)
    pos = cache.view(act)
    G = cache.G[np.ix_(pos, pos)]
    G[np.diag_indices_from(G)] += 1e-12 * (np.trace(G) / len(act) + 1e-300)
    coef = beta[act].copy()
    b = (cache.XW.T @ r)[pos] + G @ coef
    pen = act != 0
    sign = np.sign(coef)
    sign[~pen] = 0.0
    keep = np.ones(len(act), dtype=bool)

    def objective(c):
        return 0.5 * c @ G @ c - b @ c + lam * np.abs(c[pen]).sum()

    for _ in range(len(act) + 1):
        k = np.flatnonzero(keep)
        try:
            sol = np.linalg.solve(G[np.ix_(k, k)], b[k] - lam * sign[k])
        except np.linalg.LinAlgError:
            return
        if not np.all(np.isfinite(sol)):
            return
        full = np.zeros_like(coef)
        full[k] = sol
        if np.all(full[k][pen[k]] * sign[k][pen[k]] > 0.0):
            coef = full
            break
        step = full - coef
        cross = pen & keep & (coef * full <= 0.0) & (step != 0.0)
        ts = np.unique(np.clip(-coef[cross] / step[cross], 0.0, 1.0))
        best, best_f = coef, objective(coef)
        for t in ts:
            c = coef + t * step
            c[cross & (np.abs(c) <= 1e-14 * (1 + np.abs(coef)))] = 0.0
            c[cross & (c * sign < 0.0)] = 0.0
            f = objective(c)
            if f < best_f:
                best, best_f = c, f
        if best is coef:
            break
        coef = best
        dropped = pen & keep & (coef == 0.0)
        if not dropped.any():
            break
        keep &= ~dropped
        sign[dropped] = 0.0
    # on a singular Gram matrix the solve can wander along flat directions;
    # only take it when it buys a real decrease
    f0 = objective(beta[act])
    if not objective(coef) < f0 - 1e-12 * (abs(f0) + 1e-300):
        return
    delta = np.zeros(cache.cols.size)
    delta[pos] = coef - beta[act]
    r -= cache.XA @ delta
    beta[act] = coef


def _wls_lasso(X, w, beta, r, lam, tol, max_sweeps, X2=None):
    """Minimize 0.5 sum_i w_i r_i^2 + lam sum_{j>=1} |beta_j| in place.

    ``r`` must hold the working residual z - X beta on entry. Each round
    screens all columns with one gradient product, runs a coordinate sweep over
    the support plus any KKT violators, then solves exactly on the support.
    Converged when no zero coefficient violates its KKT condition and the last
    round moved no coefficient by more than ``tol``.
    """
    if X2 is None:
        X2 = X * X
    xwx = X2.T @ w
    sweeps = 0
    change = np.inf
    cache = _GramCache(X, w)
    while sweeps < max_sweeps:
        grad = X.T @ (w * r)
        # a zero coordinate only counts if its update would exceed tol
        viol = (beta == 0.0) & (np.abs(grad) - lam > tol * xwx)
        viol[0] = False
        if change < tol and not viol.any():
            return sweeps, True
        start = beta.copy()
        idx = np.flatnonzero((beta != 0.0) | viol)
        if idx.size == 0 or idx[0] != 0:
            idx = np.concatenate([[0], idx])
        _sweep(X, w, xwx, beta, r, lam, idx)
        sweeps += 1
        _solve_on_support(X, w, beta, r, lam, cache)
        change = float(np.max(np.abs(beta - start)))
    return sweeps, False


@dataclass
class HalFit:
    design: DesignMatrix
    beta: np.ndarray
    family: Family
    lam: float
    converged: bool
    iterations: int

    @property
    def l1_norm(self) -> float:
        return l1_norm(self.beta)

    @property
    def active(self) -> np.ndarray:
        """Indices of nonzero non-intercept coefficients (design column numbering)."""
        return np.flatnonzero(self.beta[1:]) + 1

    def support(self) -> np.ndarray:
        """Intercept plus active set."""
        return np.concatenate([[0], self.active])


def _as_matrix(design) -> np.ndarray:
    X = design.values if isinstance(design, DesignMatrix) else design
    return np.asfortranarray(X, dtype=float)


def lambda_max(design, y, family="gaussian") -> float:
    X = _as_matrix(design)
    family = Family.get(family)
    y = family.validate(y)
    # gaussian: residual from ybar; binomial: working residual from pbar = ybar
    resid = y - y.mean()
    if X.shape[1] < 2:
        return 0.0
    return float(np.max(np.abs(X[:, 1:].T @ resid)) / len(y))


def lambda_path(design, y, family="gaussian", n_lambda: int = 100, ratio: float = 1e-4) -> np.ndarray:
    if n_lambda < 2:
        raise SolverError("n_lambda must be >= 2")
    if not 0.0 < ratio < 1.0:
        raise SolverError("ratio must lie in (0, 1)")
    lmax = lambda_max(design, y, family)
    if lmax <= 0.0:
        raise DegenerateOutcome("degenerate outcome: lambda_max is zero")
    return lmax * np.geomspace(1.0, ratio, n_lambda)


def penalized_objective(X, y, beta, lam, family) -> float:
    eta = X @ beta
    return family.mean_loss(y, eta) + lam * float(np.abs(beta[1:]).sum())


KKT_TOL = 1e-7


def _null_beta(p, y, family):
    beta = np.zeros(p)
    ybar = float(np.mean(y))
    if family.kind == "gaussian":
        beta[0] = ybar
    else:
        pbar = min(max(ybar, PROB_CLIP), 1.0 - PROB_CLIP)
        beta[0] = np.log(pbar / (1.0 - pbar))
    return beta


def _eta(X, beta):
    s = np.flatnonzero(beta)
    return X[:, s] @ beta[s]


def _score_violation(X, beta, r, lam):
    score = X.T @ r
    active = beta != 0.0
    active[0] = False
    gap = np.abs(score) - lam
    gap[active] = np.abs(score[active] - lam * np.sign(beta[active]))
    gap[0] = abs(score[0])
    return float(gap.max())


def _fit_matrix(X, X2, y, family, lam, beta, tol, max_sweeps, max_outer, dev_tol):
    n, p = X.shape
    if family.kind == "gaussian":
        w = np.full(n, 1.0 / n)
        r = y - _eta(X, beta)
        sweeps, ok = _wls_lasso(X, w, beta, r, lam, tol, max_sweeps, X2)
        return beta, ok, sweeps

    eta = _eta(X, beta)
    obj = family.mean_loss(y, eta) + lam * np.abs(beta[1:]).sum()
    total = 0
    for _ in range(max_outer):
        prob = expit(eta)
        # floor the curvature only; the score stays exact so the fixed point is the optimum
        v = np.maximum(prob * (1.0 - prob), PROB_CLIP)
        w = v / n
        r = (y - prob) / v
        cand = beta.copy()
        sweeps, ok = _wls_lasso(X, w, cand, r, lam, tol, max_sweeps, X2)
        total += sweeps
        if not ok:
            return beta, False, total
        new_eta = _eta(X, cand)
        new_obj = family.mean_loss(y, new_eta) + lam * np.abs(cand[1:]).sum()
        halvings = 0
        # step halving keeps the outer loop monotone under near-separation
        while new_obj > obj + 1e-12 * (1.0 + abs(obj)) and halvings < 20:
            cand = beta + 0.5 * (cand - beta)
            new_eta = _eta(X, cand)
            new_obj = family.mean_loss(y, new_eta) + lam * np.abs(cand[1:]).sum()
            halvings += 1
        delta = obj - new_obj
        move = float(np.max(np.abs(cand - beta)))
        beta, eta, obj = cand, new_eta, new_obj
        if abs(delta) < dev_tol and move < 10 * tol:
            if _score_violation(X, beta, (y - expit(eta)) / n, lam) < KKT_TOL:
                return beta, True, total
        # halving means no descent is left at working precision
        if abs(delta) < dev_tol and halvings > 0:
            return beta, True, total
    return beta, False, total


def _prepare(design, y, family):
    family = Family.get(family)
    X = _as_matrix(design)
    if not np.all(np.isfinite(X)):
        raise SolverError("design contains non-finite values")
    y = family.validate(y)
    if X.shape[0] != y.shape[0]:
        raise SolverError(f"design has {X.shape[0]} rows but y has {y.shape[0]}")
    return X, y, family


def _fit_prepared(design, X, X2, y, family, lam, warm_start, kw) -> HalFit:
    if lam < 0:
        raise SolverError("lambda must be nonnegative")
    if warm_start is None:
        beta = _null_beta(X.shape[1], y, family)
    else:
        beta = np.array(warm_start, dtype=float)
    opts = dict(tol=1e-7, max_sweeps=10_000, max_outer=100, dev_tol=1e-10)
    opts.update(kw)
    beta, ok, iters = _fit_matrix(X, X2, y, family, float(lam), beta, opts["tol"],
                                  opts["max_sweeps"], opts["max_outer"], opts["dev_tol"])
    if not ok:
        log.warning("lasso did not converge at lambda=%.4g", lam)
    dm = design if isinstance(design, DesignMatrix) else DesignMatrix([], X)
    return HalFit(dm, beta, family, float(lam), bool(ok), int(iters))


def fit_lasso(design, y, family="gaussian", lam: float = 0.0, warm_start=None, **kw) -> HalFit:
    """Penalized fit at a single ``lam``; returns a :class:`HalFit`.

    Keyword options: ``tol`` (max coefficient change of a converged sweep,
    default 1e-7), ``max_sweeps`` (10000), ``max_outer`` (IRLS iterations, 100)
    and ``dev_tol`` (IRLS objective change, 1e-10). Non-convergence is reported
    through ``HalFit.converged`` rather than raised.
    """
    X, y, family = _prepare(design, y, family)
    return _fit_prepared(design, X, X * X, y, family, lam, warm_start, kw)


def fit_path(design, y, family, lambdas, **kw) -> list[HalFit]:
    """Warm-started fits along a decreasing sequence of penalties."""
    X, y, family = _prepare(design, y, family)
    X2 = X * X
    fits = []
    beta = None
    for lam in lambdas:
        fit = _fit_prepared(design, X, X2, y, family, lam, beta, kw)
        beta = fit.beta
        fits.append(fit)
    return fits


def predict(fit: HalFit, X_new_scaled=None, *, scale: str = "response", rows=None) -> np.ndarray:
    """Predictions at scaled points, or at precomputed design ``rows``.

    Only the intercept and nonzero coefficients enter the sum, so a model
    restored from disk reproduces in-memory predictions exactly.
    """
    support = fit.support()
    if rows is None:
        rows = fit.design.evaluate(X_new_scaled, support)
    else:
        rows = np.asarray(rows)[:, support]
    eta = rows @ fit.beta[support]
    if scale == "link":
        return eta
    return fit.family.response(eta)


def kkt_violation(fit: HalFit, y) -> float:
    """Largest violation of the lasso optimality conditions on training data."""
    X = _as_matrix(fit.design)
    eta = X @ fit.beta
    r = y - fit.family.response(eta)
    score = X.T @ r / len(y)
    worst = abs(score[0])
    for j in range(1, X.shape[1]):
        if fit.beta[j] != 0.0:
            worst = max(worst, abs(score[j] - fit.lam * np.sign(fit.beta[j])))
        else:
            worst = max(worst, abs(score[j]) - fit.lam)
    return float(worst)
