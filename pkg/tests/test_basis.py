import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from haldose.basis import (BasisError, BasisFunction, UnitScaler, build_design, eval_basis,
                           evaluate_bases, generate_knots, l1_norm, scale_to_unit)


def test_scaling_maps_endpoints():
    scaled, sc = scale_to_unit(np.array([[0.0], [5.0], [2.5]]))
    assert scaled[:, 0].tolist() == [0.0, 1.0, 0.5]
    assert np.allclose(sc.inverse(scaled), [[0.0], [5.0], [2.5]])


def test_constant_column_is_named():
    with pytest.raises(BasisError, match="constant column 'W2'"):
        UnitScaler.fit(np.array([[0.0, 2.0], [1.0, 2.0]]), ["W1", "W2"])


def test_transform_clips_new_points():
    sc = UnitScaler.fit(np.array([[0.0], [10.0]]))
    assert sc.transform(np.array([[-3.0], [4.0], [12.0]]))[:, 0].tolist() == [0.0, 0.4, 1.0]


def test_basis_function_validation():
    with pytest.raises(BasisError):
        BasisFunction(2, (0,), (0.1,))
    with pytest.raises(BasisError):
        BasisFunction(0, (), ())
    with pytest.raises(BasisError):
        BasisFunction(0, (0, 1), (0.1,))
    with pytest.raises(BasisError):
        BasisFunction(1, (0,), (0.1,), span=0.0)


def test_eval_examples():
    assert eval_basis(BasisFunction(0, (0,), (0.3,)), [0.3]) == 1.0
    assert eval_basis(BasisFunction(0, (0,), (0.3,)), [0.29]) == 0.0
    assert eval_basis(BasisFunction(1, (0, 1), (0.2, 0.5)), [0.6, 0.75]) == pytest.approx(0.4 * 0.25)
    assert eval_basis(BasisFunction(1, (0,), (0.2,), span=5.0), [0.6]) == pytest.approx(2.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1), st.integers(1, 3), st.integers(0, 10_000))
def test_vectorised_evaluation_matches_scalar(order, d, seed):
    rng = np.random.default_rng(seed)
    X = rng.random((15, d))
    bases = generate_knots(X, order, max_knots_per_dim=4)
    vec = evaluate_bases(bases, X)
    brute = np.array([[eval_basis(b, x) for b in bases] for x in X])
    assert np.array_equal(vec, brute)


def test_all_points_knots_cover_every_subset():
    X = np.array([[0.1, 0.9], [0.4, 0.2], [0.7, 0.5]])
    bases = generate_knots(X, 0, max_knots_per_dim=3)
    by_subset = {}
    for b in bases:
        by_subset.setdefault(b.subset, set()).add(b.knot)
    assert set(by_subset) == {(0,), (1,), (0, 1)}
    assert by_subset[(0, 1)] == {tuple(r) for r in X}
    assert by_subset[(0,)] == {(0.1,), (0.4,), (0.7,)}


def test_quantile_knots_use_lower_empirical_quantiles():
    x = np.arange(11, dtype=float) / 10
    bases = generate_knots(x[:, None], 1, max_knots_per_dim=3)
    # ranks ceil(q (n - 1)) for q = 0, 0.5, 1
    assert sorted(b.knot[0] for b in bases) == [0.0, 0.5, 1.0]


def test_multivariate_knots_are_observed_rows(rng):
    X = rng.random((50, 2))
    for b in generate_knots(X, 1, max_knots_per_dim=5):
        if len(b.subset) == 2:
            assert any(np.array_equal(np.array(b.knot), row) for row in X)


def test_max_degree_caps_interactions(rng):
    X = rng.random((10, 3))
    assert {len(b.subset) for b in generate_knots(X, 0, 4, max_degree=1)} == {1}


def test_spans_apply_to_first_order_only(rng):
    X = rng.random((10, 2))
    spans = np.array([2.0, 5.0])
    first = generate_knots(X, 1, 3, spans=spans)
    assert {b.span for b in first if b.subset == (0, 1)} == {10.0}
    assert {b.span for b in generate_knots(X, 0, 3, spans=spans)} == {1.0}


def test_design_deduplicates_and_keeps_first():
    X = np.array([[0.0], [0.5], [1.0]])
    bases = [BasisFunction(0, (0,), (0.0,)),  # all ones, kept beside the intercept
             BasisFunction(0, (0,), (0.4,)),
             BasisFunction(0, (0,), (0.5,)),  # same column as the previous one
             BasisFunction(0, (0,), (2.0,))]  # identically zero
    d = build_design(X, bases)
    assert d.columns == [bases[0], bases[1]]
    assert d.values.shape == (3, 3)
    assert np.array_equal(d.values[:, 0], np.ones(3))
    assert np.array_equal(d.evaluate(X), d.values)


def test_all_knot_design_on_four_points():
    # four distinct points give four distinct indicator columns plus the intercept
    X = np.array([[0.0], [0.2], [0.7], [1.0]])
    d = build_design(X, generate_knots(X, 0, max_knots_per_dim=4))
    assert d.values.shape == (4, 5)
    expected = np.array([[1, 1, 0, 0, 0], [1, 1, 1, 0, 0], [1, 1, 1, 1, 0], [1, 1, 1, 1, 1]], float)
    assert np.array_equal(d.values, expected)


def test_three_distinct_first_order_bases_on_five_points():
    X = np.linspace(0, 1, 5)[:, None]
    bases = [BasisFunction(1, (0,), (u,)) for u in (0.0, 0.25, 0.5)]
    assert build_design(X, bases).values.shape == (5, 4)


def test_design_is_idempotent(rng):
    X = rng.random((30, 2))
    bases = generate_knots(X, 0, 6)
    d1 = build_design(X, bases)
    d2 = build_design(X, d1.columns)
    assert d1.columns == d2.columns
    assert np.array_equal(d1.values, d2.values)


def test_order_zero_monotone_and_order_one_continuous():
    b0 = BasisFunction(0, (0, 1), (0.3, 0.6))
    b1 = BasisFunction(1, (0, 1), (0.3, 0.6))
    xs = np.linspace(0, 1, 101)
    v0 = [eval_basis(b0, [x, 0.8]) for x in xs]
    v1 = [eval_basis(b1, [x, 0.8]) for x in xs]
    assert np.all(np.diff(v0) >= 0)
    assert np.max(np.abs(np.diff(v1))) <= 0.2 * 0.01 + 1e-12
    assert eval_basis(b1, [0.9, 0.5]) == 0.0


def test_design_evaluate_selects_columns(rng):
    X = rng.random((20, 2))
    d = build_design(X, generate_knots(X, 1, 4))
    idx = [0, 3, 1]
    assert np.array_equal(d.evaluate(X, idx), d.values[:, idx])


def test_empty_inputs_raise():
    with pytest.raises(BasisError):
        build_design(np.zeros((3, 1)), [])
    with pytest.raises(BasisError):
        generate_knots(np.zeros((0, 1)), 0)
    with pytest.raises(BasisError):
        generate_knots(np.zeros((3, 1)), 0, max_knots_per_dim=0)


def test_serialisation_round_trip():
    b = BasisFunction(1, (0, 2), (0.25, 0.5), 3.0)
    assert BasisFunction.from_dict(b.to_dict()) == b
    assert l1_norm([1.0, -0.5, 0.25]) == 1.75
    assert l1_norm(np.zeros(4)) == 0.0
