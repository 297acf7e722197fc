import numpy as np
import pytest
from scipy.stats import norm

from haldose.baselines import PolyError, fit_poly, poly_curve, poly_terms
from haldose.dgd import generate, true_curve
from haldose.solver import expit
from oracles import logistic_mle


def test_terms_layout():
    X = poly_terms(np.array([[2.0], [3.0]]), np.array([1.0, 2.0]), 3)
    assert X.tolist() == [[1, 1, 1, 1, 2, 2], [1, 2, 4, 8, 3, 6]]


def test_precondition_errors(rng):
    W, A = rng.normal(size=50), rng.uniform(0, 5, 50)
    y = (rng.random(50) < 0.5).astype(float)
    with pytest.raises(PolyError):
        fit_poly(W, A, y, degree=0)
    with pytest.raises(PolyError, match="rank"):
        fit_poly(np.ones(50), A, y, degree=2)
    with pytest.raises(PolyError, match="observations"):
        fit_poly(W[:5], A[:5], y[:5], degree=3)


def test_matches_independent_mle(small_binary):
    m = fit_poly(small_binary.W, small_binary.A, small_binary.Y, degree=3)
    ref = logistic_mle(m.design(), small_binary.Y)
    assert np.allclose(m.beta, ref, atol=1e-5)
    assert np.max(np.abs(m.design().T @ (small_binary.Y - m.predict(m.W, m.A)))) / len(m.y) < 1e-9


def test_gaussian_is_least_squares(rng):
    W, A = rng.normal(size=40), rng.uniform(0, 5, 40)
    y = 1 + A - 0.2 * A ** 2 + W + rng.normal(size=40)
    m = fit_poly(W, A, y, 2, "gaussian")
    assert np.allclose(m.beta, np.linalg.lstsq(poly_terms(W, A, 2), y, rcond=None)[0])


def test_correctly_specified_model_is_consistent():
    # the first distribution is logit-linear in (W, A, W A)
    ds = generate(1, 100_000, 4)
    grid = np.array([0.5, 1.5, 2.5, 3.5, 4.5])
    curve, ic = poly_curve(fit_poly(ds.W, ds.A, ds.Y, 1), grid)
    tc = true_curve(1, grid, 1_000_000)
    assert np.all(np.abs(curve.psi - tc.psi0) < 4 * curve.se + 4 * tc.mc_se)
    assert np.all(np.abs(ic.mean(axis=0)) < 1e-6)


def test_nested_polynomial_truth_has_vanishing_bias(rng):
    n = 200_000
    W = rng.normal(size=n)
    A = rng.uniform(0, 5, n)
    logit = lambda w, a: -1 + a - 0.3 * a ** 2 + 0.5 * w + 0.2 * w * a  # noqa: E731
    y = (rng.random(n) < expit(logit(W, A))).astype(float)
    grid = np.array([0.5, 2.0, 4.0])
    curve, _ = poly_curve(fit_poly(W, A, y, 2), grid)
    x, wts = np.polynomial.hermite_e.hermegauss(80)
    truth = np.array([wts @ expit(logit(x, a)) / wts.sum() for a in grid])
    assert np.all(np.abs(curve.psi - truth) < 4 * curve.se)


def test_curve_is_smooth_at_truth_jumps():
    ds = generate(4, 2000, 1)
    m = fit_poly(ds.W, ds.A, ds.Y, 3)
    curve, _ = poly_curve(m, [1.99, 2.01, 3.99, 4.01])
    assert abs(curve.psi[1] - curve.psi[0]) < 0.01
    assert abs(curve.psi[3] - curve.psi[2]) < 0.01
    assert np.all((curve.psi >= 0) & (curve.psi <= 1))
    assert np.allclose(curve.ci_hi - curve.psi, norm.ppf(0.975) * curve.se)


def test_delta_se_matches_bootstrap():
    ds = generate(1, 500, 21)
    grid = np.array([0.5, 1.0, 2.0, 3.0, 4.0])
    m = fit_poly(ds.W, ds.A, ds.Y, 3)
    curve, _ = poly_curve(m, grid)
    rows = [poly_terms(ds.W, np.full(500, a), 3) for a in grid]
    rng = np.random.default_rng(1)
    boot = []
    for _ in range(500):
        idx = rng.integers(0, 500, 500)
        b = fit_poly(ds.W[idx], ds.A[idx], ds.Y[idx], 3).beta
        boot.append([expit(r @ b).mean() for r in rows])
    ratio = curve.se / np.std(boot, axis=0, ddof=1)
    assert np.all(np.abs(ratio - 1) < 0.15), ratio
