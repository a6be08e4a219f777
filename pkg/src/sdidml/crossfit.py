"""Cross-fitting: unit-level fold assignment and out-of-fold nuisance residuals."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import pandas as pd

from . import learners
from .errors import (
    FoldFitError,
    InsufficientData,
    MissingInstrument,
    NoResidualTreatmentVariation,
    TooFewUnits,
)
from .learners import LearnerSpec
from .panel import PanelDataset, RoleMap, format_cell


def derive_seed(*keys) -> int:
    """Integer seed for the independent stream identified by ``keys``."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> 1)


@dataclass(frozen=True)
class FoldAssignment:
    """Fold index (1..K) per unit, or per (unit, period) in observation mode."""

    K: int
    folds: Mapping
    seed: int
    level: str = "unit"

    def row_folds(self, ds: PanelDataset) -> np.ndarray:
        if self.level == "unit":
            return np.array([self.folds[u] for u in ds.unit_ids], dtype=np.int64)
        keys = zip(ds.unit_ids, ds.periods.tolist())
        return np.array([self.folds[k] for k in keys], dtype=np.int64)

    def sizes(self):
        counts = np.bincount(list(self.folds.values()), minlength=self.K + 1)
        return counts[1:].tolist()


def _round_robin(keys, K, seed):
    order = np.random.default_rng(seed).permutation(len(keys))
    return {keys[j]: int(i % K) + 1 for i, j in enumerate(order)}


def assign_folds(units, K: int, seed: int) -> FoldAssignment:
    """Seeded shuffle of the sorted unit set, then round-robin into K folds."""
    units = sorted(set(units))
    if K < 2 or K > len(units):
        raise TooFewUnits(f"cannot form {K} folds from {len(units)} units")
    return FoldAssignment(K, _round_robin(units, K, seed), seed, "unit")


def assign_observation_folds(ds: PanelDataset, K: int, seed: int) -> FoldAssignment:
    """Row-level folds; observations of one unit may land in different folds."""
    keys = list(zip(ds.unit_ids, ds.periods.tolist()))
    if K < 2 or K > len(keys):
        raise TooFewUnits(f"cannot form {K} folds from {len(keys)} observations")
    return FoldAssignment(K, _round_robin(keys, K, seed), seed, "observation")


def _fit_fold(k, X, y, row_fold, spec, seed, names):
    train = row_fold != k
    if not train.any():
        raise FoldFitError(k, InsufficientData("no training rows"))
    try:
        model = learners.fit(spec.with_seed(derive_seed(seed, k)), X[train], y[train], names)
        return k, learners.predict(model, X[~train])
    except Exception as err:
        raise FoldFitError(k, err) from err


def out_of_fold_predict(ds: PanelDataset, target, features, spec: LearnerSpec,
                        folds: FoldAssignment, n_jobs: int = 1) -> np.ndarray:
    """Predict each fold from a model trained on all other folds.

    ``target`` is a column name or a vector aligned with the rows of ``ds``.
    Fold k's learner is seeded from (folds.seed, k), so the result does not
    depend on ``n_jobs``.
    """
    y = ds.column(target) if isinstance(target, str) else np.asarray(target, dtype=float)
    X = ds.matrix(list(features))
    row_fold = folds.row_folds(ds)
    out = np.empty(len(y))
    jobs = range(1, folds.K + 1)
    args = (X, y, row_fold, spec, folds.seed, list(features))
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(lambda k: _fit_fold(k, *args), jobs))
    else:
        results = [_fit_fold(k, *args) for k in jobs]
    for k, pred in results:
        out[row_fold == k] = pred
    return out


@dataclass
class ResidualizedPanel:
    units: np.ndarray
    periods: np.ndarray
    y_res: np.ndarray
    d_res: np.ndarray
    fold: np.ndarray
    clusters: np.ndarray
    K: int
    seed: int
    specs: dict
    z_res: Optional[np.ndarray] = None
    fold_level: str = "unit"
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_obs(self):
        return len(self.y_res)

    def to_frame(self) -> pd.DataFrame:
        cols = {"unit": self.units, "period": self.periods, "fold": self.fold,
                "y_res": self.y_res, "d_res": self.d_res}
        if self.z_res is not None:
            cols["z_res"] = self.z_res
        return pd.DataFrame(cols)

    def write_csv(self, path):
        frame = self.to_frame()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(frame.columns)
            for row in frame.itertuples(index=False):
                w.writerow([format_cell(v) for v in row])


def period_demean(ds: PanelDataset, values) -> np.ndarray:
    """Subtract the cross-sectional mean of each period."""
    s = pd.Series(np.asarray(values, dtype=float))
    return (s - s.groupby(ds.periods).transform("mean")).to_numpy()


def residualize(ds: PanelDataset, y_spec: LearnerSpec, d_spec: LearnerSpec, folds: FoldAssignment,
                z_spec: Optional[LearnerSpec] = None, roles: Optional[RoleMap] = None,
                time_effects: bool = False, n_jobs: int = 1) -> ResidualizedPanel:
    """Cross-fitted residuals Y - g(X), D - m(X) and optionally Z - l(X).

    With ``time_effects`` the outcome, treatment and instrument are first
    demeaned by period, which partials out additive period effects before
    the learners see the data.
    """
    roles = roles or ds.roles
    if roles is None:
        raise ValueError("dataset has no roles; call assign_roles first")
    if not roles.covariates:
        raise InsufficientData("nuisance fitting needs at least one covariate")
    if z_spec is not None and roles.instrument is None:
        raise MissingInstrument("z_spec given but no instrument role is set")

    def target(col):
        v = ds.column(col)
        return period_demean(ds, v) if time_effects else v

    features = list(roles.covariates)
    y = target(roles.outcome)
    d = target(roles.treatment)
    y_res = y - out_of_fold_predict(ds, y, features, y_spec, folds, n_jobs)
    d_res = d - out_of_fold_predict(ds, d, features, d_spec, folds, n_jobs)
    z_res = None
    if z_spec is not None:
        z = target(roles.instrument)
        z_res = z - out_of_fold_predict(ds, z, features, z_spec, folds, n_jobs)
    if np.var(d_res, ddof=1) < 1e-12:
        raise NoResidualTreatmentVariation(
            "treatment is perfectly predicted by the covariates (no overlap)"
        )
    specs = {"y": y_spec.descriptor, "d": d_spec.descriptor}
    diagnostics = {"mean_y_res": float(y_res.mean()), "mean_d_res": float(d_res.mean())}
    if z_spec is not None:
        specs["z"] = z_spec.descriptor
        diagnostics["mean_z_res"] = float(z_res.mean())
    return ResidualizedPanel(
        units=ds.unit_ids,
        periods=ds.periods,
        y_res=y_res,
        d_res=d_res,
        fold=folds.row_folds(ds),
        clusters=ds.cluster_ids(),
        K=folds.K,
        seed=folds.seed,
        specs=specs,
        z_res=z_res,
        fold_level=folds.level,
        diagnostics=diagnostics,
    )
