"""Mechanism and heterogeneity analysis: moderation through a D x W
interaction, product-of-paths mediation and subgroup re-estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import (
    CollinearAfterDemeaning,
    ConstantMediator,
    ConstantModerator,
    DegenerateClusters,
    GroupTooSmall,
    MissingColumn,
)
from .estimators import TwfeResult, estimate_twfe
from .inference import normal_sf, summarize_inference
from .panel import PanelDataset, filter_subgroup, unit_group_values
from .pipeline import DmlPipeline


@dataclass
class Coefficient:
    coef: float
    se: float
    statistic: float
    p_value: float
    ci_low: float
    ci_high: float

    @classmethod
    def from_row(cls, row):
        return cls(*(float(row[k]) for k in ("coef", "se", "t", "p", "ci_low", "ci_high")))

    def to_dict(self):
        return dict(self.__dict__)


def _require(ds, name, role):
    if name is None:
        raise MissingColumn(f"no {role} role assigned")
    if name not in ds.frame.columns:
        raise MissingColumn(name)


def _varies(x):
    return bool(np.ptp(x) > 0) if len(x) else False


@dataclass
class ModerationResult:
    main: Coefficient
    interaction: Coefficient
    moderator_main: Optional[Coefficient]  # None when W is absorbed by the unit effects
    twfe: TwfeResult
    interaction_name: str

    def to_dict(self):
        return {
            "main": self.main.to_dict(),
            "interaction": self.interaction.to_dict(),
            "moderator_main": self.moderator_main.to_dict() if self.moderator_main else None,
            "interaction_name": self.interaction_name,
            "n_obs": self.twfe.n_obs,
            "n_clusters": self.twfe.n_clusters,
        }


def moderation(ds: PanelDataset, covariates: Optional[Sequence[str]] = None,
               cluster=True) -> ModerationResult:
    """TWFE of Y on D, D*W, W and the covariates.

    A moderator that is fixed within every unit is absorbed by the unit
    effects; its main effect is then dropped and reported as None.
    """
    roles = ds.roles
    w_name, d_name = roles.moderator, roles.treatment
    _require(ds, w_name, "moderator")
    covariates = list(roles.covariates if covariates is None else covariates)
    w, d = ds.column(w_name), ds.column(d_name)
    if not _varies(w):
        raise ConstantModerator(f"{w_name} is constant; D x {w_name} is collinear with D")
    inter = f"{d_name}_x_{w_name}"
    extra = {inter: d * w}
    try:
        fit = estimate_twfe(ds, roles.outcome, [d_name, inter, w_name] + covariates,
                            cluster=cluster, extra_columns=extra)
        w_main = Coefficient.from_row(fit.coefficients.loc[w_name])
    except CollinearAfterDemeaning as err:
        if err.column == inter:
            raise ConstantModerator(f"D x {w_name} is collinear with D") from None
        if err.column != w_name:
            raise
        fit = estimate_twfe(ds, roles.outcome, [d_name, inter] + covariates,
                            cluster=cluster, extra_columns=extra)
        w_main = None
    return ModerationResult(
        main=Coefficient.from_row(fit.coefficients.loc[d_name]),
        interaction=Coefficient.from_row(fit.coefficients.loc[inter]),
        moderator_main=w_main,
        twfe=fit,
        interaction_name=inter,
    )


def ols_cluster(ds: PanelDataset, y: str, regressors: Sequence[str], cluster=True) -> pd.DataFrame:
    """Pooled OLS with an intercept and CR1 cluster-robust inference (t, G - 1 df)."""
    X = np.column_stack([np.ones(ds.n_rows)] + [ds.column(c) for c in regressors])
    yv = ds.column(y)
    n, k = X.shape
    xtx_inv = np.linalg.inv(X.T @ X)
    beta = xtx_inv @ X.T @ yv
    e = yv - X @ beta
    cl = ds.cluster_ids() if cluster is True else np.arange(n)
    codes, levels = pd.factorize(cl, sort=True)
    G = len(levels)
    if G < 2:
        raise DegenerateClusters(f"{G} cluster(s); need at least 2")
    scores = np.zeros((G, k))
    np.add.at(scores, codes, X * e[:, None])
    vcov = G / (G - 1) * (n - 1) / (n - k) * xtx_inv @ (scores.T @ scores) @ xtx_inv
    se = np.sqrt(np.diag(vcov))
    rows = [[beta[j], se[j], *summarize_inference(beta[j], se[j], G - 1)] for j in range(k)]
    return pd.DataFrame(rows, index=["const"] + list(regressors),
                        columns=["coef", "se", "t", "p", "ci_low", "ci_high"])


@dataclass
class MediationResult:
    total: Coefficient  # c: D -> Y
    a: Coefficient  # D -> M
    b: Coefficient  # M -> Y given D
    direct: Coefficient  # c': D -> Y given M
    indirect: float  # a * b
    indirect_se: float
    indirect_z: float
    indirect_p: float
    method: str  # "sobel" or "bootstrap"
    fixed_effects: bool
    n_obs: int
    bootstrap_reps: int = 0
    bootstrap_seed: Optional[int] = None

    def to_dict(self):
        out = {k: (v.to_dict() if isinstance(v, Coefficient) else v)
               for k, v in self.__dict__.items()}
        return out


def _paths(ds, y, d, m, covariates, cluster, fixed_effects):
    if fixed_effects:
        def fit(dep, regs):
            return estimate_twfe(ds, dep, regs, cluster=cluster).coefficients
    else:
        def fit(dep, regs):
            return ols_cluster(ds, dep, regs, cluster=cluster)
    total = fit(y, [d] + covariates).loc[d]
    a = fit(m, [d] + covariates).loc[d]
    joint = fit(y, [d, m] + covariates)
    return total, a, joint.loc[m], joint.loc[d]


def _resample_units(ds, rng):
    """Cluster bootstrap draw: units with replacement, duplicates relabeled."""
    units = ds.units
    pick = rng.integers(0, len(units), len(units))
    uid = ds.unit_ids
    frames = []
    for k, j in enumerate(pick):
        part = ds.frame[uid == units[j]].copy()
        part[ds.unit_col] = f"b{k:06d}"
        frames.append(part)
    frame = pd.concat(frames, ignore_index=True)
    return PanelDataset.from_frame(frame, ds.unit_col, ds.time_col, ds.roles)


def mediation(ds: PanelDataset, covariates: Optional[Sequence[str]] = None, cluster=True,
              fixed_effects: bool = True, method: str = "sobel", reps: int = 500,
              seed: int = 123) -> MediationResult:
    """Product-of-paths mediation of D -> M -> Y.

    Three regressions on one sample: Y on D (total c), M on D (path a) and Y
    on D and M jointly (b and direct c'). The indirect effect a*b gets the
    delta-method SE sqrt(a^2 se_b^2 + b^2 se_a^2), or with
    ``method="bootstrap"`` the sd of a*b over unit-level resamples.
    ``fixed_effects=False`` swaps the TWFE fits for pooled OLS.
    """
    roles = ds.roles
    m_name = roles.mediator
    _require(ds, m_name, "mediator")
    if not _varies(ds.column(m_name)):
        raise ConstantMediator(f"{m_name} is constant")
    covariates = list(roles.covariates if covariates is None else covariates)
    y, d = roles.outcome, roles.treatment
    total, a, b, direct = _paths(ds, y, d, m_name, covariates, cluster, fixed_effects)
    a_c, b_c = Coefficient.from_row(a), Coefficient.from_row(b)
    indirect = a_c.coef * b_c.coef
    if method == "sobel":
        se = math.sqrt(a_c.coef**2 * b_c.se**2 + b_c.coef**2 * a_c.se**2)
    elif method == "bootstrap":
        draws = []
        for r in range(reps):
            boot = _resample_units(ds, np.random.default_rng([seed, r]))
            _, ba, bb, _ = _paths(boot, y, d, m_name, covariates, cluster, fixed_effects)
            draws.append(ba["coef"] * bb["coef"])
        se = float(np.std(draws, ddof=1))
    else:
        raise ValueError(f"unknown mediation method {method!r}")
    z = indirect / se if se > 0 else math.copysign(math.inf, indirect)
    return MediationResult(
        total=Coefficient.from_row(total),
        a=a_c,
        b=b_c,
        direct=Coefficient.from_row(direct),
        indirect=indirect,
        indirect_se=se,
        indirect_z=z,
        indirect_p=2 * normal_sf(abs(z)),
        method=method,
        fixed_effects=fixed_effects,
        n_obs=ds.n_rows,
        bootstrap_reps=reps if method == "bootstrap" else 0,
        bootstrap_seed=seed if method == "bootstrap" else None,
    )


@dataclass
class GroupDifference:
    group_a: str
    group_b: str
    delta: float
    se: float
    statistic: float
    p_value: float

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class SubgroupComparison:
    column: str
    groups: dict  # group label -> EstimateResult
    differences: list = field(default_factory=list)
    assumption: str = "groups are disjoint unit sets, estimates treated as independent"

    def to_dict(self):
        return {
            "column": self.column,
            "groups": {k: v.to_dict() for k, v in self.groups.items()},
            "differences": [d.to_dict() for d in self.differences],
            "assumption": self.assumption,
        }


def _label(value):
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def subgroup_compare(ds: PanelDataset, column: str, pipeline: DmlPipeline) -> SubgroupComparison:
    """Re-run the full pipeline within each value of a unit-level grouping.

    Every group uses the pipeline's seed for its own fold assignment.
    Pairwise differences use SE sqrt(se_A^2 + se_B^2) and a normal test.
    """
    per_unit = unit_group_values(ds, column)
    values = sorted(set(per_unit.values()))
    if len(values) < 2:
        raise GroupTooSmall(_label(values[0]) if values else "", 2, len(values))
    need = 2 * pipeline.folds
    for v in values:
        n_units = sum(1 for x in per_unit.values() if x == v)
        if n_units < need:
            raise GroupTooSmall(_label(v), need, n_units)
    groups = {_label(v): pipeline(filter_subgroup(ds, column, [v])) for v in values}
    labels = list(groups)
    diffs = []
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            ra, rb = groups[labels[i]], groups[labels[j]]
            delta = ra.theta - rb.theta
            se = math.sqrt(ra.se**2 + rb.se**2)
            z = delta / se if se > 0 else math.copysign(math.inf, delta)
            diffs.append(GroupDifference(labels[i], labels[j], delta, se, z, 2 * normal_sf(abs(z))))
    return SubgroupComparison(column, groups, diffs)
