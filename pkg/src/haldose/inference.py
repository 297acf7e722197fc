"""Plug-in dose-response curves and delta-method intervals.

The working model is the fitted basis restricted to the intercept and the
active set. Its coefficient influence curve is the usual M-estimator form
``M^{-1} phi_i (y_i - mu_i)`` with ``M = P_n[w phi phi^T]`` (``w = 1`` for
gaussian, ``mu (1 - mu)`` for binomial), and the curve at ``a`` inherits it
through the gradient ``m(a) = P_n[mu'(phi(a, W)) phi(a, W)]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .solver import Family

log = logging.getLogger(__name__)

COND_LIMIT = 1e12


class InferenceError(ValueError):
    pass


@dataclass
class CurveEstimate:
    grid: np.ndarray
    psi: np.ndarray
    se: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    alpha: float
    n: int

    def rows(self):
        for k in range(len(self.grid)):
            yield (float(self.grid[k]), float(self.psi[k]), float(self.se[k]),
                   float(self.ci_lo[k]), float(self.ci_hi[k]))


@dataclass
class InfluenceCurves:
    ic_beta: np.ndarray
    ic_psi: np.ndarray | None = None
    ridged: bool = False


def z_quantile(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise InferenceError(f"alpha must lie in (0, 1), got {alpha}")
    return float(norm.ppf(1.0 - alpha / 2.0))


def wald_curve(grid, psi, se, alpha: float, n: int) -> CurveEstimate:
    z = z_quantile(alpha)
    psi = np.asarray(psi, dtype=float)
    se = np.asarray(se, dtype=float)
    half = z * se
    return CurveEstimate(np.asarray(grid, dtype=float), psi, se, psi - half, psi + half, alpha, n)


def coefficient_ic(Phi, resid, weights=None) -> InfluenceCurves:
    """Influence curve of working-model coefficients, one row per observation.

    ``Phi`` holds the n x q design rows (intercept first). The empirical curve
    is centred: for a penalized fit its raw mean is the penalty subgradient,
    which is not part of the sampling fluctuation.
    """
    Phi = np.asarray(Phi, dtype=float)
    n, q = Phi.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    M = (Phi * w[:, None]).T @ Phi / n
    ridged = False
    if not np.all(np.isfinite(M)) or np.linalg.cond(M) > COND_LIMIT:
        eps = 1e-8 * np.trace(M) / q
        M = M + eps * np.eye(q)
        ridged = True
        log.warning("information matrix is near singular; added ridge %.3g", eps)
        if not np.all(np.isfinite(M)) or np.linalg.cond(M) > COND_LIMIT * 1e4:
            raise InferenceError("information matrix is singular even after ridging")
    score = Phi * np.asarray(resid, dtype=float)[:, None]
    ic = np.linalg.solve(M, score.T).T
    ic -= ic.mean(axis=0)
    return InfluenceCurves(ic, ridged=ridged)


def plug_in_curve(rows_at, beta, family: Family, grid, ic_beta, alpha: float,
                  include_w_term: bool = False) -> tuple[CurveEstimate, np.ndarray]:
    """Average predictions over the covariate sample at each grid value.

    ``rows_at(a)`` returns the n x q working-model rows with treatment set to
    ``a``. Returns the curve and the n x len(grid) matrix of its influence
    curves.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise InferenceError("empty evaluation grid")
    beta = np.asarray(beta, dtype=float)
    n = ic_beta.shape[0]
    psi = np.empty(len(grid))
    ic_psi = np.empty((n, len(grid)))
    for k, a in enumerate(grid):
        rows = rows_at(a)
        eta = rows @ beta
        mu = family.response(eta)
        psi[k] = mu.mean()
        grad = (rows * family.response_derivative(eta)[:, None]).mean(axis=0)
        ic = ic_beta @ grad
        if include_w_term:
            ic = ic + (mu - psi[k])
        ic_psi[:, k] = ic
    se = np.sqrt(np.var(ic_psi, axis=0, ddof=1) / n) if n > 1 else np.zeros(len(grid))
    return wald_curve(grid, psi, se, alpha, n), ic_psi


def _model_parts(model):
    fit = model.fit
    support = fit.support()
    return fit, support, fit.beta[support]


def estimate_curve(model, grid, W=None) -> np.ndarray:
    """Plug-in curve ``(1/n) sum_i mu(phi(a, W_i) beta)`` at each grid value."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise InferenceError("empty evaluation grid")
    fit, support, beta = _model_parts(model)
    W = model.W if W is None else np.atleast_2d(np.asarray(W, dtype=float))
    out = np.empty(len(grid))
    for k, a in enumerate(grid):
        eta = model.rows_at(a, W, support) @ beta
        out[k] = fit.family.response(eta).mean()
    return out


def influence_beta(model) -> InfluenceCurves:
    fit, support, beta = _model_parts(model)
    Phi = fit.design.values[:, support]
    eta = Phi @ beta
    mu = fit.family.response(eta)
    weights = None if fit.family.kind == "gaussian" else mu * (1.0 - mu)
    return coefficient_ic(Phi, model.y - mu, weights)


def delta_ci(model, grid, alpha: float = 0.05, W=None,
             include_w_term: bool = False) -> tuple[CurveEstimate, InfluenceCurves]:
    """Plug-in curve with pointwise Wald intervals from the delta method.

    The covariate sample defaults to the training covariates. Intervals are
    not clipped to the outcome range.
    """
    z_quantile(alpha)
    fit, support, beta = _model_parts(model)
    ics = influence_beta(model)
    W = model.W if W is None else np.atleast_2d(np.asarray(W, dtype=float))
    if W.shape[0] != ics.ic_beta.shape[0] and include_w_term:
        raise InferenceError("the covariate term needs the training covariates")
    curve, ic_psi = plug_in_curve(lambda a: model.rows_at(a, W, support), beta, fit.family,
                                  grid, ics.ic_beta, alpha, include_w_term)
    ics.ic_psi = ic_psi
    return curve, ics
