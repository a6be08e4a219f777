"""Regression learners for the nuisance functions E[Y|X] and E[D|X].

Every learner is described by an immutable :class:`LearnerSpec` and fitted
with :func:`fit`; binary targets are fitted as regressions, so predictions
are unclipped reals.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from ..errors import InsufficientData, ShapeMismatch
from . import linear, trees
from .linear import lasso_lambda_path

KINDS = ("mean", "ols", "ridge", "lasso_cv", "forest", "boosting")

_DEPTH_DEFAULT = {"forest": 20, "boosting": 3}


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    seed: int = 0
    lam: Optional[float] = None  # ridge penalty; for lasso_cv a fixed penalty skips CV
    n_lambdas: int = 100
    lambda_min_ratio: float = 1e-4
    cv_folds: int = 5
    n_trees: int = 500
    max_depth: Optional[int] = None
    mtry: Optional[int] = None
    min_leaf: int = 5
    bootstrap: bool = True
    learning_rate: float = 0.01
    max_rounds: int = 2000
    early_stop_rounds: int = 50

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "ridge" and (self.lam is None or self.lam < 0):
            raise ValueError("ridge needs a non-negative lam")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be non-negative")

    @property
    def depth(self):
        if self.max_depth is not None:
            return self.max_depth
        return _DEPTH_DEFAULT.get(self.kind, 20)

    def with_seed(self, seed) -> LearnerSpec:
        return replace(self, seed=int(seed))

    @property
    def descriptor(self):
        """Kind plus every parameter that differs from its default, seed excluded."""
        base = LearnerSpec("mean")
        parts = []
        for f in fields(self):
            if f.name in ("kind", "seed"):
                continue
            v = getattr(self, f.name)
            if v != getattr(base, f.name):
                parts.append(f"{f.name}={v}")
        return self.kind + (f"({','.join(parts)})" if parts else "")


_SPEC_RE = re.compile(r"^\s*(\w+)\s*(?:\((.*)\))?\s*$")


def parse_learner(text: str, seed: int = 0) -> LearnerSpec:
    """Parse ``"forest"`` or ``"forest(n_trees=200, max_depth=10)"``."""
    m = _SPEC_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse learner {text!r}")
    kind, args = m.group(1), m.group(2)
    types = {f.name: f.type for f in fields(LearnerSpec)}
    kwargs = {}
    if args and args.strip():
        for item in args.split(","):
            key, _, raw = item.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in types or key == "kind":
                raise ValueError(f"unknown learner parameter {key!r}")
            if key == "bootstrap":
                kwargs[key] = raw.lower() in ("1", "true", "yes")
            elif "float" in str(types[key]):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = int(raw)
    kwargs.setdefault("seed", seed)
    return LearnerSpec(kind, **kwargs)


@dataclass(frozen=True)
class FittedModel:
    spec: LearnerSpec
    n_features: int
    intercept: float = 0.0
    coef: Optional[np.ndarray] = None
    ensemble: Optional[trees.TreeEnsemble] = None
    summary: dict = field(default_factory=dict)

    def predict(self, X):
        return predict(self, X)


def _check_xy(X, y, min_rows=2):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or len(X) != len(y):
        raise ShapeMismatch(f"X {X.shape} and y {y.shape} do not align")
    if len(y) < min_rows:
        raise InsufficientData(f"need at least {min_rows} rows")
    if X.shape[1] < 1:
        raise InsufficientData("need at least one feature")
    if np.isnan(X).any() or np.isnan(y).any():
        raise ValueError("missing values in learner input")
    return X, y


def fit(spec: LearnerSpec, X, y, feature_names=None) -> FittedModel:
    """Fit ``spec`` on an n x p design; deterministic given the spec's seed."""
    kind = spec.kind
    X, y = _check_xy(X, y, 1 if kind == "mean" else 2)
    n, p = X.shape
    info = {}
    intercept, coef, ensemble = 0.0, None, None
    if kind == "mean":
        intercept, coef = linear.fit_mean(X, y)
    elif kind == "ols":
        intercept, coef = linear.fit_ols(X, y, feature_names)
    elif kind == "ridge":
        intercept, coef = linear.fit_ridge(X, y, spec.lam)
    elif kind == "lasso_cv":
        if spec.lam is not None:
            lam = spec.lam
            intercept, coef = linear.fit_lasso(X, y, lam)
        else:
            lam, table = linear.select_lambda_cv(
                X, y, spec.n_lambdas, spec.lambda_min_ratio, spec.cv_folds, spec.seed
            )
            info["cv_table"] = table
            path = table[: int(np.argmax(table[:, 0] == lam)) + 1, 0]
            Xs, x_mean, x_scale = linear.standardize_design(X)
            beta = linear.lasso_path_standardized(Xs, y - y.mean(), path)[-1]
            intercept, coef = linear._to_original(beta, x_mean, x_scale, y.mean())
        info["lambda"] = float(lam)
    elif kind == "forest":
        mtry = spec.mtry if spec.mtry is not None else max(1, p // 3)
        ensemble = trees.fit_forest(
            X, y, spec.n_trees, spec.depth, min(mtry, p), spec.min_leaf, spec.bootstrap, spec.seed
        )
        info["mtry"] = min(mtry, p)
    elif kind == "boosting":
        intercept, ensemble, history = trees.fit_boosting(
            X, y, spec.learning_rate, spec.max_rounds, spec.early_stop_rounds,
            spec.depth, spec.min_leaf, spec.seed,
        )
        info["rounds_run"] = len(history)
        info["best_round"] = ensemble.n_trees
        info["validation_mse"] = history
    model = FittedModel(spec, p, intercept, coef, ensemble, info)
    resid = y - predict(model, X)
    info["train_mse"] = float(resid @ resid / n)
    return model


def predict(model: FittedModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ShapeMismatch(f"model expects {model.n_features} features, got shape {X.shape}")
    kind = model.spec.kind
    if kind == "forest":
        return model.ensemble.sum_predictions(X) / model.ensemble.n_trees
    if kind == "boosting":
        out = np.full(len(X), model.intercept)
        if model.ensemble.n_trees:
            out += model.spec.learning_rate * model.ensemble.sum_predictions(X)
        return out
    return model.intercept + X @ model.coef


def select_lambda_cv(X, y, spec: LearnerSpec):
    """Cross-validated lasso penalty and the per-penalty CV-MSE table."""
    return linear.select_lambda_cv(X, y, spec.n_lambdas, spec.lambda_min_ratio, spec.cv_folds, spec.seed)


__all__ = [
    "FittedModel",
    "LearnerSpec",
    "fit",
    "lasso_lambda_path",
    "parse_learner",
    "predict",
    "select_lambda_cv",
]
