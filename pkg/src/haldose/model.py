"""End-to-end HAL estimator: scaling, selection, final fit, curve and serialization."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .basis import BasisFunction, DesignMatrix, UnitScaler
from .inference import CurveEstimate, delta_ci, estimate_curve
from .selection import HalConfig, SelectionResult, evaluate_candidates, finalize
from .solver import Family, HalFit, predict

SCHEMA_VERSION = 1


@dataclass
class HalModel:
    """A fitted HAL regression of Y on (W, A), treatment in the last coordinate."""

    scaler: UnitScaler
    fit: HalFit
    config: HalConfig
    selection: SelectionResult | None
    W: np.ndarray
    A: np.ndarray
    y: np.ndarray

    @property
    def design(self) -> DesignMatrix:
        return self.fit.design

    def _scaled(self, W, A) -> np.ndarray:
        W = np.atleast_2d(np.asarray(W, dtype=float))
        if W.shape[0] == 1 and np.ndim(A) and len(A) > 1:
            W = np.repeat(W, len(A), axis=0)
        A = np.broadcast_to(np.asarray(A, dtype=float), (W.shape[0],))
        return self.scaler.transform(np.column_stack([W, A]))

    def rows_at(self, a: float, W, columns) -> np.ndarray:
        """Design rows with every covariate row paired with treatment ``a``."""
        return self.design.evaluate(self._scaled(W, np.full(len(W), a)), columns)

    def predict(self, W, A, scale: str = "response") -> np.ndarray:
        return predict(self.fit, self._scaled(W, A), scale=scale)

    def psi(self, grid, W=None) -> np.ndarray:
        return estimate_curve(self, grid, W)

    def curve(self, grid, alpha: float = 0.05, W=None, include_w_term: bool = False) -> CurveEstimate:
        return delta_ci(self, grid, alpha, W, include_w_term)[0]

    @property
    def treatment_range(self) -> tuple[float, float]:
        return self.scaler.mins[-1], self.scaler.maxs[-1]

    def to_dict(self) -> dict:
        support = self.fit.support()
        return {
            "schema_version": SCHEMA_VERSION,
            "family": self.fit.family.kind,
            "scaler": {"mins": list(self.scaler.mins), "maxs": list(self.scaler.maxs)},
            # only the intercept and active bases are needed to predict
            "bases": [self.design.columns[k - 1].to_dict() for k in support[1:]],
            "beta": [float(b) for b in self.fit.beta[support]],
            "lambda": self.fit.lam,
            "l1_norm": self.fit.l1_norm,
            "converged": self.fit.converged,
            "config": self.config.to_dict(),
            "selection": self.selection.to_dict() if self.selection else None,
            "training": {"W": self.W.tolist(), "A": self.A.tolist(), "y": self.y.tolist()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HalModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported model schema_version {d.get('schema_version')!r}")
        scaler = UnitScaler(tuple(d["scaler"]["mins"]), tuple(d["scaler"]["maxs"]))
        bases = [BasisFunction.from_dict(b) for b in d["bases"]]
        tr = d["training"]
        y = np.asarray(tr["y"], dtype=float)
        W = np.asarray(tr["W"], dtype=float).reshape(len(y), -1)
        A = np.asarray(tr["A"], dtype=float)
        design = DesignMatrix(bases, np.empty((0, 0)))
        design.values = design.evaluate(scaler.transform(np.column_stack([W, A])))
        fit = HalFit(design, np.asarray(d["beta"], dtype=float), Family(d["family"]),
                     float(d["lambda"]), bool(d["converged"]), 0)
        config = HalConfig.from_dict(d["config"])
        sel = d.get("selection")
        selection = None
        if sel:
            selection = SelectionResult(HalConfig.from_dict(sel["chosen_config"]), sel["lambda_cv"],
                                        sel["lambda_final"], np.asarray(sel["lambdas"]),
                                        {k: [np.nan if v is None else v for v in r]
                                         for k, r in sel["cv_risks"].items()},
                                        [], sel.get("warning"))
        return cls(scaler, fit, config, selection, W, A, y)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "HalModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def prepare_inputs(W, A, y):
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (W.shape[0] == len(A) == len(y)):
        raise ValueError("W, A and y must have the same number of rows")
    names = [f"W{j + 1}" for j in range(W.shape[1])] + ["A"]
    scaler = UnitScaler.fit(np.column_stack([W, A]), names)
    return W, A, y, scaler


def fit_hal_selectors(W, A, y, config: HalConfig | None = None,
                      selectors=("cv", "undersmooth")) -> dict[str, HalModel]:
    """One model per selector; candidates and CV are computed once and shared."""
    config = config or HalConfig()
    W, A, y, scaler = prepare_inputs(W, A, y)
    X = scaler.transform(np.column_stack([W, A]))
    spans = np.asarray(scaler.maxs) - np.asarray(scaler.mins)
    best, risks = evaluate_candidates(X, y, config, spans)
    out = {}
    for selector, (result, fit) in finalize(best, y, risks, selectors, config.score_all_bases).items():
        out[selector] = HalModel(scaler, fit, config, result, W, A, y)
    return out


def fit_hal(W, A, y, config: HalConfig | None = None) -> HalModel:
    """Fit HAL of ``y`` on covariates ``W`` (n x d_W) and treatment ``A``."""
    config = config or HalConfig()
    return fit_hal_selectors(W, A, y, config, (config.selector,))[config.selector]
