"""The four simulation data-generating distributions and their true curves.

Each draws W ~ N(0, 1), a clamped treatment A = bound(c - 0.5 W + U_A, 0, 5)
and a binary outcome Y = I[U_Y < expit(f(W, A))].
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .solver import expit

A_MIN, A_MAX = 0.0, 5.0
TRUTH_SEED = 20240601


def _f1(W, A):
    return -3 + 0.5 * W + 1.25 * A - 0.5 * W * A


def _f2(W, A):
    return -5 + 3 * W + 5 * np.sin(1.25 * A ** 1.5) + 3 * W * A


def _f3(W, A):
    return -4 - 2 * W + 1.5 * A + (A > 2) * 1.5 * np.sin((0.8 * A) ** 2 - 2.56)


def _f4(W, A):
    return -2 + W + A * (A >= 2) - A * (A >= 4) - 0.5 * W * A


@dataclass(frozen=True)
class Dgd:
    id: int
    a_center: float
    a_sd: float
    logit: Callable

    def treatment(self, W, U_A):
        return np.clip(self.a_center - 0.5 * W + U_A, A_MIN, A_MAX)

    def outcome_mean(self, W, A):
        return expit(self.logit(W, A))


DGDS = {
    1: Dgd(1, 2.0, 2.0, _f1),
    2: Dgd(2, 2.5, 1.3, _f2),
    3: Dgd(3, 2.0, 2.0, _f3),
    4: Dgd(4, 2.5, 1.0, _f4),
}


def get_dgd(dgd_id: int) -> Dgd:
    try:
        return DGDS[int(dgd_id)]
    except (KeyError, ValueError):
        raise ValueError(f"unknown dgd id {dgd_id!r}; expected one of {sorted(DGDS)}") from None


@dataclass
class Dataset:
    W: np.ndarray  # n x d_W
    A: np.ndarray
    Y: np.ndarray

    @property
    def n(self) -> int:
        return len(self.Y)


def generate(dgd_id: int, n: int, seed) -> Dataset:
    """``n`` draws from DGD ``dgd_id``; ``seed`` is anything numpy accepts."""
    dgd = get_dgd(dgd_id)
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 1.0, n)
    U_A = rng.normal(0.0, dgd.a_sd, n)
    U_Y = rng.uniform(0.0, 1.0, n)
    A = dgd.treatment(W, U_A)
    Y = (U_Y < dgd.outcome_mean(W, A)).astype(float)
    return Dataset(W[:, None], A, Y)


@dataclass
class TrueCurve:
    grid: np.ndarray
    psi0: np.ndarray
    n_mc: int
    mc_se: np.ndarray


@lru_cache(maxsize=64)
def _true_curve_cached(dgd_id: int, grid: tuple, n_mc: int, seed: int, chunk: int):
    dgd = get_dgd(dgd_id)
    rng = np.random.default_rng(seed)
    G = len(grid)
    s1 = np.zeros(G)
    s2 = np.zeros(G)
    done = 0
    while done < n_mc:
        m = min(chunk, n_mc - done)
        W = rng.normal(0.0, 1.0, m)  # common draws across grid points
        for k, a in enumerate(grid):
            mu = dgd.outcome_mean(W, np.full(m, a))
            s1[k] += mu.sum()
            s2[k] += (mu * mu).sum()
        done += m
    mean = s1 / n_mc
    var = np.maximum(s2 / n_mc - mean ** 2, 0.0) * n_mc / (n_mc - 1)
    return mean, np.sqrt(var / n_mc)


def true_curve(dgd_id: int, grid, n_mc: int = 10_000_000, seed: int = TRUTH_SEED,
               chunk: int = 1_000_000) -> TrueCurve:
    """Monte Carlo truth psi0(a) = E_W expit(f(W, a)) with its standard error."""
    grid = tuple(float(a) for a in np.atleast_1d(grid))
    psi0, se = _true_curve_cached(int(dgd_id), grid, int(n_mc), int(seed), int(chunk))
    return TrueCurve(np.asarray(grid), psi0.copy(), int(n_mc), se.copy())


def true_curve_quadrature(dgd_id: int, grid, nodes: int = 200) -> np.ndarray:
    """Gauss-Hermite evaluation of the same truth; an independent cross-check."""
    dgd = get_dgd(dgd_id)
    x, wts = np.polynomial.hermite_e.hermegauss(nodes)
    wts = wts / wts.sum()
    return np.array([wts @ dgd.outcome_mean(x, np.full(nodes, a)) for a in np.atleast_1d(grid)])
