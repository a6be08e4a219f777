"""Partialling-out DML, IV-DML and the two-way fixed-effects benchmark.

All standard errors are cluster-robust sandwich estimates; without clusters
every observation is its own cluster.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from .crossfit import ResidualizedPanel
from .errors import (
    CollinearAfterDemeaning,
    DegenerateClusters,
    InsufficientPanel,
    MissingInstrument,
    NonConvergence,
    NoResidualTreatmentVariation,
    WeakDenominator,
    WeakInstrumentWarning,
)
from .inference import NORMAL, fmt7, summarize_inference
from .panel import PanelDataset


def round7(x):
    """Round to 7 significant digits for serialization; non-finite -> None."""
    if x is None:
        return None
    x = float(x)
    if not math.isfinite(x):
        return None
    return float(f"{x:.7g}")


@dataclass
class EstimateResult:
    theta: float
    se: float
    statistic: float
    p_value: float
    ci_low: float
    ci_high: float
    n_obs: int
    n_clusters: int
    df: Union[int, str] = NORMAL
    method: str = "plr"
    learners: dict = field(default_factory=dict)
    folds: Optional[int] = None
    seed: Optional[int] = None
    diagnostics: dict = field(default_factory=dict)

    def covers(self, value) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_dict(self):
        out = {
            "theta": round7(self.theta),
            "se": round7(self.se),
            "statistic": round7(self.statistic),
            "p_value": round7(self.p_value),
            "ci_low": round7(self.ci_low),
            "ci_high": round7(self.ci_high),
            "n_obs": int(self.n_obs),
            "n_clusters": int(self.n_clusters),
            "df": self.df,
            "method": self.method,
            "learners": dict(self.learners),
            "folds": self.folds,
            "seed": self.seed,
        }
        if self.diagnostics:
            out["diagnostics"] = {k: round7(v) if isinstance(v, float) else v
                                  for k, v in self.diagnostics.items()}
        return out

    def summary_line(self):
        label = "z" if self.df == NORMAL else "t"
        return (
            f"θ={fmt7(self.theta)}, SE={fmt7(self.se)}, {label}={fmt7(self.statistic)}, "
            f"p={fmt7(self.p_value)}, 95% CI [{fmt7(self.ci_low)}, {fmt7(self.ci_high)}]"
        )


def _cluster_codes(clusters, n):
    if clusters is None:
        return np.arange(n), n
    codes, uniques = pd.factorize(np.asarray(clusters), sort=True)
    return codes, len(uniques)


def cluster_robust_se(psi, clusters, jacobian):
    """sqrt(G/(G-1) * sum_g S_g^2) / |jacobian| with S_g the cluster score sums.

    ``clusters=None`` treats each row as a cluster (HC1-type correction n/(n-1)).
    """
    n = len(psi)
    codes, G = _cluster_codes(clusters, n)
    if G < 2:
        raise DegenerateClusters(f"{G} cluster(s); need at least 2")
    sums = np.bincount(codes, weights=psi, minlength=G)
    return math.sqrt(G / (G - 1) * float(sums @ sums)) / abs(jacobian), G


def _wald(theta, se, n_obs, n_clusters, **meta):
    if se > 0:
        inf = summarize_inference(theta, se, NORMAL)
    else:
        # exact fit: the score vanishes identically
        stat = 0.0 if theta == 0 else math.copysign(math.inf, theta)
        inf = (stat, 1.0 if theta == 0 else 0.0, theta, theta)
    return EstimateResult(theta, se, *inf, n_obs=n_obs, n_clusters=n_clusters, **meta)


def _resolve_clusters(res, cluster):
    if cluster is True:
        return res.clusters
    if cluster is False or cluster is None:
        return None
    return np.asarray(cluster)


def estimate_plr(res: ResidualizedPanel, cluster=True) -> EstimateResult:
    """Residual-on-residual slope sum(D~ Y~) / sum(D~^2) with sandwich SE.

    ``cluster`` is True (use the panel's cluster ids), False (row-level
    robust) or an explicit array of cluster labels.
    """
    y, d = res.y_res, res.d_res
    if np.var(d, ddof=1) < 1e-12:
        raise NoResidualTreatmentVariation("residual treatment has no variance")
    jac = float(d @ d)
    theta = float(d @ y) / jac
    psi = (y - theta * d) * d
    se, G = cluster_robust_se(psi, _resolve_clusters(res, cluster), jac)
    return _wald(theta, se, res.n_obs, G, method="plr", learners=dict(res.specs), folds=res.K,
                 seed=res.seed, diagnostics=dict(res.diagnostics))


def estimate_iv_plr(res: ResidualizedPanel, cluster=True) -> EstimateResult:
    """Partially linear IV: sum(Z~ Y~) / sum(Z~ D~).

    The first-stage t statistic of D~ on Z~ is reported in the diagnostics; a
    :class:`WeakInstrumentWarning` is issued when its square is below 10.
    """
    if res.z_res is None:
        raise MissingInstrument("residualized panel has no instrument residuals")
    y, d, z = res.y_res, res.d_res, res.z_res
    n = len(y)
    jac = float(z @ d)
    if abs(jac) / n < 1e-12:
        raise WeakDenominator("instrument residual is orthogonal to treatment residual")
    clusters = _resolve_clusters(res, cluster)
    theta = float(z @ y) / jac
    psi = (y - theta * d) * z
    se, G = cluster_robust_se(psi, clusters, jac)

    zz = float(z @ z)
    pi = jac / zz
    fs_se, _ = cluster_robust_se((d - pi * z) * z, clusters, zz)
    fs_t = pi / fs_se if fs_se > 0 else math.inf
    weak = fs_t**2 < 10
    if weak:
        warnings.warn(f"weak instrument: first-stage t^2 = {fs_t**2:.3g} < 10",
                      WeakInstrumentWarning, stacklevel=2)
    diagnostics = dict(res.diagnostics)
    diagnostics.update(first_stage_t=float(fs_t), weak_instrument=bool(weak))
    return _wald(theta, se, n, G, method="iv_plr", learners=dict(res.specs), folds=res.K,
                 seed=res.seed, diagnostics=diagnostics)


def difference_in_means(ds: PanelDataset, cluster=True) -> EstimateResult:
    """Treated-minus-untreated mean outcome; the naive benchmark."""
    y = ds.column(ds.roles.outcome)
    d = ds.column(ds.roles.treatment)
    if d.min() == d.max():
        raise NoResidualTreatmentVariation("treatment is constant")
    dc = d - d.mean()
    jac = float(dc @ dc)
    theta = y[d == 1].mean() - y[d == 0].mean()
    resid = y - y.mean() - theta * dc
    se, G = cluster_robust_se(resid * dc, ds.cluster_ids() if cluster else None, jac)
    return _wald(theta, se, len(y), G, method="difference_in_means")


# ---------------------------------------------------------------- two-way FE

DEMEAN_TOL = 1e-10
DEMEAN_MAX_SWEEPS = 1000


def demean_two_way(values, unit_codes, period_codes, tol=DEMEAN_TOL, max_sweeps=DEMEAN_MAX_SWEEPS):
    """Alternate unit-mean and period-mean subtraction until a full sweep
    moves no cell by more than ``tol``.

    Returns ``(demeaned, sweeps, last_max_change)``.
    """
    x = np.array(values, dtype=float, copy=True)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    n_u = unit_codes.max() + 1
    n_t = period_codes.max() + 1
    cnt_u = np.bincount(unit_codes, minlength=n_u)[:, None]
    cnt_t = np.bincount(period_codes, minlength=n_t)[:, None]

    def group_means(codes, counts, n_groups):
        sums = np.zeros((n_groups, x.shape[1]))
        np.add.at(sums, codes, x)
        return sums / counts

    change = math.inf
    for sweep in range(1, max_sweeps + 1):
        before = x.copy()
        x -= group_means(unit_codes, cnt_u, n_u)[unit_codes]
        x -= group_means(period_codes, cnt_t, n_t)[period_codes]
        change = float(np.max(np.abs(x - before))) if x.size else 0.0
        if change < tol:
            return (x[:, 0] if squeeze else x), sweep, change
    raise NonConvergence(f"demeaning did not converge in {max_sweeps} sweeps (last change {change:.3g})")


@dataclass
class TwfeResult:
    coefficients: pd.DataFrame  # index: regressor; columns coef, se, t, p, ci_low, ci_high
    vcov: np.ndarray
    n_obs: int
    n_clusters: int
    n_units: int
    n_periods: int
    df: int
    sweeps: int
    max_change: float
    r2_within: float
    residuals: np.ndarray = field(repr=False, default=None)

    def coef(self, name):
        return float(self.coefficients.loc[name, "coef"])

    def se(self, name):
        return float(self.coefficients.loc[name, "se"])

    def to_dict(self):
        return {
            "coefficients": {
                name: {k: round7(v) for k, v in row.items()}
                for name, row in self.coefficients.iterrows()
            },
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "absorbed": {"units": self.n_units, "periods": self.n_periods},
            "df": self.df,
            "demeaning": {"sweeps": self.sweeps, "max_change": self.max_change},
            "r2_within": round7(self.r2_within),
        }


def _nested(fe_codes, cluster_codes):
    """True when every fixed-effect level sits inside a single cluster."""
    frame = pd.DataFrame({"fe": fe_codes, "cl": cluster_codes})
    return bool((frame.groupby("fe")["cl"].nunique() == 1).all())


def estimate_twfe(ds: PanelDataset, y: str, regressors: Sequence[str], cluster=True,
                  extra_columns: Optional[dict] = None) -> TwfeResult:
    """OLS of ``y`` on ``regressors`` absorbing unit and period effects.

    Covariance is CR1: G/(G-1) * (n-1)/(n-k) times the cluster sandwich, where
    k counts the slopes, the constant and the levels of every absorbed effect
    that is not nested within the clusters. Inference uses Student t with
    G - 1 degrees of freedom. ``cluster`` is True (panel cluster ids), False
    (each row its own cluster) or a column name. ``extra_columns`` maps
    additional regressor names to value vectors not stored in ``ds``.
    """
    unit_codes, units = pd.factorize(ds.unit_ids, sort=True)
    period_codes, periods = pd.factorize(ds.periods, sort=True)
    if len(units) < 2 or len(periods) < 2:
        raise InsufficientPanel("two-way fixed effects need at least 2 units and 2 periods")
    extra_columns = extra_columns or {}
    names = list(regressors)
    cols = [extra_columns[c] if c in extra_columns else ds.column(c) for c in names]
    X = np.column_stack(cols) if cols else np.zeros((ds.n_rows, 0))
    yv = ds.column(y)
    Z, sweeps, change = demean_two_way(np.column_stack([yv, X]), unit_codes, period_codes)
    yt, Xt = Z[:, 0], Z[:, 1:]

    for j, name in enumerate(names):
        scale = np.linalg.norm(X[:, j] - X[:, j].mean()) + 1e-300
        if np.linalg.norm(Xt[:, j]) <= 1e-8 * max(scale, 1.0):
            raise CollinearAfterDemeaning(name)
    if names:
        _, r = np.linalg.qr(Xt)
        diag = np.abs(np.diag(r))
        bad = np.flatnonzero(diag <= 1e-10 * np.linalg.norm(Xt, axis=0))
        if bad.size:
            raise CollinearAfterDemeaning(names[bad[0]])

    n, k = Xt.shape
    if cluster is True:
        cl = ds.cluster_ids()
    elif cluster is False or cluster is None:
        cl = np.arange(n)
    else:
        cl = ds.frame[cluster].to_numpy()
    cl_codes, cl_levels = pd.factorize(cl, sort=True)
    G = len(cl_levels)
    if G < 2:
        raise DegenerateClusters(f"{G} cluster(s); need at least 2")

    xtx_inv = np.linalg.inv(Xt.T @ Xt) if k else np.zeros((0, 0))
    beta = xtx_inv @ Xt.T @ yt if k else np.zeros(0)
    e = yt - Xt @ beta
    k_total = k + 1
    for codes, levels in ((unit_codes, len(units)), (period_codes, len(periods))):
        if not _nested(codes, cl_codes):
            k_total += levels - 1
    scores = np.zeros((G, k))
    np.add.at(scores, cl_codes, Xt * e[:, None])
    # no residual degrees of freedom: the fit is exact and the SE undefined
    c = G / (G - 1) * (n - 1) / (n - k_total) if n > k_total else math.nan
    vcov = c * xtx_inv @ (scores.T @ scores) @ xtx_inv
    se = np.sqrt(np.diag(vcov))
    df = G - 1
    rows = []
    for j in range(k):
        if np.isfinite(se[j]) and se[j] > 0:
            inf = summarize_inference(beta[j], se[j], df)
        else:
            inf = (math.nan, math.nan, beta[j], beta[j])
        rows.append([beta[j], se[j], *inf])
    table = pd.DataFrame(rows, index=names, columns=["coef", "se", "t", "p", "ci_low", "ci_high"])
    tss = float(yt @ yt)
    r2 = 1 - float(e @ e) / tss if tss > 0 else math.nan
    return TwfeResult(table, vcov, n, G, len(units), len(periods), df, sweeps, change, r2, e)
