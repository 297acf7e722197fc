import math

import numpy as np
import pytest

from haldose.basis import UnitScaler, build_design, generate_knots
from haldose.selection import (Candidate, CvResult, HalConfig, SelectionError, cv_select,
                               discrete_super_learner, evaluate_candidates, finalize,
                               heldout_loss, make_folds, pick_min_risk, select,
                               undersmooth_select, undersmooth_threshold)
from haldose.solver import Family, fit_lasso, lambda_path


def scaled(ds):
    raw = np.column_stack([ds.W, ds.A])
    sc = UnitScaler.fit(raw)
    return sc.transform(raw), np.asarray(sc.maxs) - np.asarray(sc.mins)


def test_config_validation():
    with pytest.raises(SelectionError):
        HalConfig(folds=1)
    with pytest.raises(SelectionError):
        HalConfig(n_lambda=1)
    with pytest.raises(SelectionError):
        HalConfig(order=2)
    with pytest.raises(SelectionError):
        HalConfig(selector="bic")
    with pytest.raises(SelectionError):
        HalConfig.from_dict({"order": 1, "bogus": 3})
    c = HalConfig(order=1, max_knots_per_dim=7, family="binomial")
    assert HalConfig.from_dict(c.to_dict()) == c


def test_adaptive_candidates():
    orders = [(c.order, c.max_knots_per_dim) for c in HalConfig().candidates()]
    assert orders == [(0, None), (1, 20)]


def test_tie_goes_to_larger_lambda():
    assert pick_min_risk([3, 2, 2, 4]) == 1
    assert pick_min_risk([3, np.nan, 2, 2]) == 2


def test_folds_are_deterministic_and_stratified():
    y = np.array([0] * 37 + [1] * 63, dtype=float)
    a = make_folds(100, 10, 5, y)
    assert np.array_equal(a, make_folds(100, 10, 5, y))
    assert not np.array_equal(a, make_folds(100, 10, 6, y))
    for k in range(10):
        ones = int(y[a == k].sum())
        assert ones in (6, 7)
        assert np.sum(a == k) == 10
    with pytest.raises(SelectionError):
        make_folds(5, 10, 0)


def test_constant_fold_outcome_is_refused():
    X = np.column_stack([np.ones(8), np.arange(8) / 7])
    y = np.array([0, 0, 0, 0, 0, 0, 1, 1], dtype=float)
    folds = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    with pytest.raises(SelectionError, match="constant outcome"):
        cv_select(X, y, "binomial", [0.1, 0.01], folds)


def test_loo_matches_brute_force(rng):
    n = 10
    x = rng.random(n)
    y = np.sin(3 * x) + 0.3 * rng.normal(size=n)
    # fewer columns than training rows keeps every fold's solution unique
    design = build_design(x[:, None], generate_knots(x[:, None], 1, 5))
    lams = lambda_path(design, y, "gaussian", 8, 0.01)
    cv = cv_select(design, y, "gaussian", lams, np.arange(n))
    brute = np.zeros(len(lams))
    for i in range(n):
        keep = np.arange(n) != i
        for li, lam in enumerate(lams):
            beta = fit_lasso(design.values[keep], y[keep], "gaussian", lam, tol=1e-10).beta
            brute[li] += (y[i] - design.values[i] @ beta) ** 2 / n
    assert np.allclose(cv.risks, brute, atol=1e-6)
    assert cv.index == pick_min_risk(brute)


def test_pure_noise_selects_large_lambda():
    picks = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        x = rng.random((60, 1))
        y = rng.normal(size=60)
        design = build_design(x, generate_knots(x, 1, 20))
        lams = lambda_path(design, y, "gaussian", 20, 0.001)
        cv = cv_select(design, y, "gaussian", lams, make_folds(60, 5, seed))
        picks.append(cv.index)
    assert np.median(picks) < 20 / 4


def test_patience_agrees_with_full_path(small_binary):
    X, spans = scaled(small_binary)
    design = build_design(X, generate_knots(X, 1, 10, spans=spans))
    y = small_binary.Y
    lams = lambda_path(design, y, "binomial", 40, 1e-4)
    folds = make_folds(len(y), 10, 1, y)
    full = cv_select(design, y, "binomial", lams, folds)
    short = cv_select(design, y, "binomial", lams, folds, patience=10)
    assert short.index == full.index
    seen = ~np.isnan(short.risks)
    assert np.allclose(short.risks[seen], full.risks[seen])


def test_heldout_binomial_loss_is_finite():
    loss = heldout_loss(Family.get("binomial"), np.array([1.0, 0.0]), np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(loss))
    assert np.allclose(loss, -np.log(1e-5))


def test_threshold_decreases_in_n():
    vals = [undersmooth_threshold(0.5, n) for n in (10, 100, 1000, 10_000)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert undersmooth_threshold(1.0, 100) == pytest.approx(1 / (10 * math.log(100)))


def gaussian_problem(rng, n=200):
    x = rng.random((n, 1))
    y = np.where(x[:, 0] > 0.5, 1.0, 0.0) + np.sin(6 * x[:, 0]) + 0.5 * rng.normal(size=n)
    design = build_design(x, generate_knots(x, 1, 30))
    return design, y


def test_undersmooth_accepts_lambda_cv_when_criterion_holds(rng):
    design, y = gaussian_problem(rng)
    lams = lambda_path(design, y, "gaussian", 30, 1e-4)
    # the last path value is essentially unpenalized, so its scores are ~0
    res = undersmooth_select(design, y, "gaussian", lams, len(lams) - 1)
    assert res.index == len(lams) - 1
    assert res.warning is None
    assert res.trace[0].max_score <= res.trace[0].threshold


def test_undersmooth_falls_back_to_smallest_lambda(rng):
    design, y = gaussian_problem(rng)
    lams = lambda_path(design, y, "gaussian", 30, 1e-4)[:6]
    res = undersmooth_select(design, y, "gaussian", lams, 2)
    assert all(s.max_score > s.threshold for s in res.trace)
    assert res.lambda_u == lams[-1]
    assert "smallest" in res.warning


def test_undersmooth_result_is_first_satisfying_lambda(rng):
    design, y = gaussian_problem(rng)
    lams = lambda_path(design, y, "gaussian", 60, 1e-5)
    res = undersmooth_select(design, y, "gaussian", lams, 5)
    ok = [s.max_score <= s.threshold and s.n_active > 0 for s in res.trace]
    assert ok.index(True) == res.index - 5
    assert res.lambda_u <= lams[5]


def test_undersmooth_empty_active_set_keeps_lambda_cv(rng):
    x = rng.random((40, 1))
    y = rng.normal(size=40)
    design = build_design(x, generate_knots(x, 1, 5))
    lam0 = lambda_path(design, y, "gaussian", 2, 0.5)[0]
    lams = np.array([lam0 * 4, lam0 * 2, lam0 * 1.01])
    res = undersmooth_select(design, y, "gaussian", lams, 0)
    assert res.index == 0
    assert "empty active set" in res.warning


def _cand(order, knots, risk):
    cfg = HalConfig(order=order, max_knots_per_dim=knots)
    return Candidate(cfg, None, np.array([1.0]), CvResult(np.array([1.0]), np.array([risk]), 0))


def test_discrete_super_learner_rules():
    assert discrete_super_learner([_cand(0, None, 0.20), _cand(1, 20, 0.18)]) == 1
    assert discrete_super_learner([_cand(1, 20, 0.2), _cand(0, None, 0.2)]) == 1
    assert discrete_super_learner([_cand(1, 30, 0.2), _cand(1, 10, 0.2)]) == 1
    with pytest.raises(SelectionError):
        discrete_super_learner([_cand(0, None, 0.2)])


def test_selectors_share_lambda_cv(small_binary):
    X, spans = scaled(small_binary)
    cfg = HalConfig(order=1, max_knots_per_dim=10, family="binomial", n_lambda=40)
    best, risks = evaluate_candidates(X, small_binary.Y, cfg, spans)
    out = finalize(best, small_binary.Y, risks)
    cv_res, cv_fit = out["cv"]
    us_res, us_fit = out["undersmooth"]
    assert cv_res.lambda_final == cv_res.lambda_cv == us_res.lambda_cv
    assert us_res.lambda_final <= us_res.lambda_cv
    assert us_fit.lam == us_res.lambda_final
    assert cv_fit.lam == cv_res.lambda_cv
    assert us_res.chosen_config.selector == "undersmooth"
    _, single, fit = select(X, small_binary.Y, cfg, spans)
    assert single.lambda_cv == cv_res.lambda_cv
    assert np.array_equal(fit.beta, cv_fit.beta)
    assert single.to_dict()["lambda_final"] == single.lambda_final


def test_adaptive_reports_both_candidates(small_binary):
    X, spans = scaled(small_binary)
    cfg = HalConfig(family="binomial", n_lambda=30, adaptive_knots=(15, 10))
    best, risks = evaluate_candidates(X, small_binary.Y, cfg, spans)
    assert set(risks) == {"order0-k15", "order1-k10"}
    winner = min(risks, key=lambda k: (np.nanmin(risks[k]), k))
    assert best.config.label == winner


def test_small_n_is_rejected():
    with pytest.raises(SelectionError, match="too small"):
        evaluate_candidates(np.random.default_rng(0).random((15, 2)),
                            np.r_[np.zeros(7), np.ones(8)], HalConfig(order=0, family="binomial"))
