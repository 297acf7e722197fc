"""Parametric polynomial plug-in comparator.

The outcome regression uses the terms 1, A, ..., A^degree, each W_j and each
W_j * A, fitted by least squares or logistic maximum likelihood. Its curve and
intervals come from the same plug-in and delta-method code as HAL, with the
full weighted Gram matrix in place of the active-set one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .inference import CurveEstimate, coefficient_ic, plug_in_curve
from .solver import Family, expit

MAX_NEWTON = 200
GRAD_TOL = 1e-9


class PolyError(ValueError):
    pass


def poly_terms(W, A, degree: int) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    A = np.asarray(A, dtype=float)
    powers = [A ** k for k in range(1, degree + 1)]
    return np.column_stack([np.ones(len(A)), *powers, W, W * A[:, None]])


@dataclass
class PolyModel:
    degree: int
    beta: np.ndarray
    family: Family
    W: np.ndarray
    A: np.ndarray
    y: np.ndarray
    iterations: int = 0

    def design(self, W=None, A=None) -> np.ndarray:
        return poly_terms(self.W if W is None else W, self.A if A is None else A, self.degree)

    def predict(self, W, A) -> np.ndarray:
        return self.family.response(self.design(W, A) @ self.beta)


def _newton(X, y):
    n = len(y)
    beta = np.zeros(X.shape[1])
    ybar = y.mean()
    beta[0] = np.log(ybar / (1.0 - ybar))
    for it in range(1, MAX_NEWTON + 1):
        p = expit(X @ beta)
        grad = X.T @ (y - p) / n
        if np.max(np.abs(grad)) < GRAD_TOL:
            return beta, it
        H = (X * (p * (1.0 - p))[:, None]).T @ X / n
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise PolyError("singular information matrix during Newton iterations") from None
        beta = beta + step
        if not np.all(np.isfinite(beta)):
            break
    raise PolyError(f"logistic Newton iterations did not converge in {MAX_NEWTON} steps")


def fit_poly(W, A, y, degree: int = 3, family="binomial") -> PolyModel:
    """Unpenalized polynomial regression of ``y`` on the treatment and covariates."""
    if int(degree) < 1:
        raise PolyError("degree must be >= 1")
    degree = int(degree)
    family = Family.get(family)
    y = family.validate(y)
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    A = np.asarray(A, dtype=float)
    X = poly_terms(W, A, degree)
    n, q = X.shape
    if n <= q:
        raise PolyError(f"need more than {q} observations for {q} terms, got {n}")
    if np.linalg.matrix_rank(X) < q:
        raise PolyError("polynomial design is rank deficient")
    if family.kind == "gaussian":
        beta = np.linalg.lstsq(X, y, rcond=None)[0]
        iters = 1
    else:
        if y.min() == y.max():
            raise PolyError("binary outcome is constant")
        beta, iters = _newton(X, y)
    return PolyModel(degree, beta, family, W, A, y, iters)


def poly_curve(model: PolyModel, grid, alpha: float = 0.05, W=None,
               include_w_term: bool = False) -> tuple[CurveEstimate, np.ndarray]:
    """Plug-in curve and delta-method intervals; returns the curve and its ICs."""
    X = model.design()
    mu = model.family.response(X @ model.beta)
    weights = None if model.family.kind == "gaussian" else mu * (1.0 - mu)
    ics = coefficient_ic(X, model.y - mu, weights)
    W = model.W if W is None else np.atleast_2d(np.asarray(W, dtype=float))
    if include_w_term and W.shape[0] != X.shape[0]:
        raise PolyError("the covariate term needs the training covariates")

    def rows_at(a):
        return poly_terms(W, np.full(W.shape[0], a), model.degree)

    return plug_in_curve(rows_at, model.beta, model.family, grid, ics.ic_beta, alpha,
                         include_w_term)
