"""Tensor-product spline bases of order 0 and 1 and the HAL design matrix.

Coordinates are 0-based throughout. Inputs are expected on the unit cube;
:class:`UnitScaler` maps raw covariates there and clips anything that falls
outside the training range.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree


class BasisError(ValueError):
    pass


@dataclass(frozen=True)
class UnitScaler:
    """Per-coordinate min-max transform learned on training data."""

    mins: tuple[float, ...]
    maxs: tuple[float, ...]

    @classmethod
    def fit(cls, raw, names: Sequence[str] | None = None) -> "UnitScaler":
        raw = np.asarray(raw, dtype=float)
        if raw.ndim != 2:
            raise BasisError("expected a 2-d array")
        lo = raw.min(axis=0)
        hi = raw.max(axis=0)
        for j in range(raw.shape[1]):
            if not hi[j] > lo[j]:
                name = names[j] if names is not None else str(j)
                raise BasisError(f"constant column {name!r}: no scale defined")
        return cls(tuple(float(v) for v in lo), tuple(float(v) for v in hi))

    @property
    def dim(self) -> int:
        return len(self.mins)

    def transform(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        lo = np.asarray(self.mins)
        hi = np.asarray(self.maxs)
        return np.clip((raw - lo) / (hi - lo), 0.0, 1.0)

    def inverse(self, scaled) -> np.ndarray:
        lo = np.asarray(self.mins)
        hi = np.asarray(self.maxs)
        return np.asarray(scaled, dtype=float) * (hi - lo) + lo


def scale_to_unit(raw, names: Sequence[str] | None = None) -> tuple[np.ndarray, UnitScaler]:
    scaler = UnitScaler.fit(raw, names)
    return scaler.transform(raw), scaler


@dataclass(frozen=True)
class BasisFunction:
    """Indicator (order 0) or hinge product (order 1) over ``subset``.

    ``span`` multiplies the value. First-order bases use it to measure hinges
    in the covariates' original units while knots stay on the unit cube.
    """

    order: int
    subset: tuple[int, ...]
    knot: tuple[float, ...]
    span: float = 1.0

    def __post_init__(self):
        if self.order not in (0, 1):
            raise BasisError(f"unsupported spline order {self.order}")
        if not self.subset:
            raise BasisError("subset must be nonempty")
        if len(set(self.subset)) != len(self.subset):
            raise BasisError(f"duplicate coordinates in subset {self.subset}")
        if len(self.knot) != len(self.subset):
            raise BasisError("knot must have one component per subset member")
        if not self.span > 0.0:
            raise BasisError("span must be positive")

    def to_dict(self) -> dict:
        return {"order": self.order, "subset": list(self.subset), "knot": list(self.knot),
                "span": self.span}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisFunction":
        return cls(int(d["order"]), tuple(int(j) for j in d["subset"]),
                   tuple(float(u) for u in d["knot"]), float(d.get("span", 1.0)))


def eval_basis(b: BasisFunction, x) -> float:
    x = np.asarray(x, dtype=float)
    value = 1.0
    for j, u in zip(b.subset, b.knot):
        if x[j] < u:
            return 0.0
        if b.order == 1:
            value *= x[j] - u
    return float(value * b.span)


def evaluate_bases(bases: Sequence[BasisFunction], X) -> np.ndarray:
    """Evaluate every basis at every row of ``X``; returns an n x len(bases) array."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    out = np.empty((X.shape[0], len(bases)), order="F")
    # group by (order, subset) so each group is one broadcast
    groups: dict[tuple, list[int]] = {}
    for k, b in enumerate(bases):
        groups.setdefault((b.order, b.subset), []).append(k)
    for (order, subset), cols in groups.items():
        knots = np.array([bases[k].knot for k in cols])  # (m, |S|)
        vals = np.ones((X.shape[0], len(cols)))
        for pos, j in enumerate(subset):
            diff = X[:, j][:, None] - knots[:, pos][None, :]
            if order == 0:
                vals *= diff >= 0.0
            else:
                vals *= np.where(diff >= 0.0, diff, 0.0)
        spans = np.array([bases[k].span for k in cols])
        out[:, cols] = vals if np.all(spans == 1.0) else vals * spans
    return out


def _subsets(d: int, max_degree: int | None):
    top = d if max_degree is None else min(d, max_degree)
    for size in range(1, top + 1):
        yield from combinations(range(d), size)


def _quantile_values(col: np.ndarray, n_knots: int) -> np.ndarray:
    # lower empirical quantile: 0-based index ceil(q (n-1))
    s = np.sort(col)
    q = np.linspace(0.0, 1.0, n_knots)
    idx = np.ceil(q * (len(s) - 1) - 1e-12).astype(int)
    return s[np.clip(idx, 0, len(s) - 1)]


def default_max_knots(order: int, n: int) -> int:
    return n if order == 0 else 20


def generate_knots(X_scaled, order: int, max_knots_per_dim: int | None = None,
                   max_degree: int | None = None, spans=None) -> list[BasisFunction]:
    """Candidate bases: one per (coordinate subset, knot) pair, duplicates dropped.

    With ``max_knots_per_dim >= n`` every observed row supplies a knot for every
    subset. Otherwise each coordinate contributes equally spaced empirical
    quantiles; for multi-coordinate subsets the product grid of those quantiles
    is snapped to the nearest observed rows. ``spans`` gives each coordinate's
    original range; first-order bases then carry the product over their subset.
    """
    X = np.asarray(X_scaled, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise BasisError("cannot generate knots from an empty sample")
    if order not in (0, 1):
        raise BasisError(f"unsupported spline order {order}")
    n, d = X.shape
    if max_knots_per_dim is None:
        max_knots_per_dim = default_max_knots(order, n)
    if max_knots_per_dim < 1:
        raise BasisError("max_knots_per_dim must be >= 1")

    bases: list[BasisFunction] = []
    use_all = max_knots_per_dim >= n
    per_coord = None if use_all else [_quantile_values(X[:, j], max_knots_per_dim) for j in range(d)]
    for subset in _subsets(d, max_degree):
        sub = X[:, subset]
        if use_all:
            knots = np.unique(sub, axis=0)
        elif len(subset) == 1:
            knots = np.unique(per_coord[subset[0]])[:, None]
        else:
            axes = [np.unique(per_coord[j]) for j in subset]
            grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(subset))
            _, nearest = cKDTree(sub).query(grid)
            knots = np.unique(sub[np.unique(nearest)], axis=0)
        span = 1.0
        if order == 1 and spans is not None:
            span = float(np.prod([spans[j] for j in subset]))
        bases.extend(BasisFunction(order, subset, tuple(float(u) for u in row), span)
                     for row in knots)
    return bases


@dataclass
class DesignMatrix:
    """Intercept plus deduplicated basis columns evaluated on training rows.

    ``columns[k]`` describes ``values[:, k + 1]``; column 0 of ``values`` is the
    intercept.
    """

    columns: list[BasisFunction]
    values: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return len(self.columns)

    def evaluate(self, X_scaled, idx=None) -> np.ndarray:
        """Design rows at new points, intercept included.

        ``idx`` selects design columns (0 = intercept) and keeps their order.
        """
        X_scaled = np.atleast_2d(np.asarray(X_scaled, dtype=float))
        if idx is None:
            idx = np.arange(self.p + 1)
        idx = np.asarray(idx, dtype=int)
        out = np.ones((X_scaled.shape[0], len(idx)), order="F")
        mask = idx > 0
        if mask.any():
            out[:, mask] = evaluate_bases([self.columns[k - 1] for k in idx[mask]], X_scaled)
        return out


def build_design(X_scaled, bases: Sequence[BasisFunction]) -> DesignMatrix:
    """Evaluate ``bases`` on the training rows and drop redundant columns.

    A column is dropped when its values equal an earlier kept basis column or
    are identically zero (the latter carries no information and cannot be
    fit). A basis column equal to the intercept is kept; its unpenalized twin
    absorbs it, so its coefficient stays at zero.
    """
    if not bases:
        raise BasisError("no basis functions supplied")
    X = np.asarray(X_scaled, dtype=float)
    vals = evaluate_bases(bases, X)
    seen = set()
    keep = []
    for k in range(vals.shape[1]):
        col = vals[:, k]
        if not col.any():
            continue
        key = col.tobytes()
        if key in seen:
            continue
        seen.add(key)
        keep.append(k)
    values = np.empty((X.shape[0], len(keep) + 1), order="F")
    values[:, 0] = 1.0
    values[:, 1:] = vals[:, keep]
    return DesignMatrix([bases[k] for k in keep], values)


def l1_norm(beta) -> float:
    return float(np.abs(np.asarray(beta, dtype=float)).sum())
