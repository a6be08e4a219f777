"""Robustness checks: binned event study, placebo permutations, randomized
counterfactual timing and fold/learner sensitivity scans."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import NoControlUnits, NoPrePeriods, SdidmlError, TooManyFailedReps
from .estimators import EstimateResult, estimate_twfe
from .learners import LearnerSpec
from .panel import NEVER, CohortMap, PanelDataset, cohorts_from_treatment, relative_time
from .pipeline import DmlPipeline


class NoPostPeriods(SdidmlError):
    pass


@dataclass
class EventStudyResult:
    table: pd.DataFrame  # relative_time, coef, se, ci_low, ci_high
    reference: int
    floor_bin: int
    n_obs: int
    n_clusters: int

    def coef(self, rel):
        return float(self.table.set_index("relative_time").loc[rel, "coef"])


def _dummy_name(v):
    return f"rt_m{-v}" if v < 0 else f"rt_p{v}"


def event_study(ds: PanelDataset, cohorts: CohortMap, covariates: Sequence[str] = (),
                floor_bin: int = -4, reference: int = -1, cluster=True,
                outcome: Optional[str] = None) -> EventStudyResult:
    """Dynamic effects from relative-time dummies in a two-way FE regression.

    Leads at or below ``floor_bin`` share one dummy; ``reference`` is omitted
    and normalized to zero. Never-treated units have every dummy at 0.
    """
    outcome = outcome or ds.roles.outcome
    if not cohorts.never_treated_units:
        raise NoControlUnits("event study needs never-treated units as controls")
    rel = relative_time(ds, cohorts, floor_bin)
    values = sorted(int(v) for v in rel.dropna().unique())
    pre = [v for v in values if v < reference]
    post = [v for v in values if v > reference]
    if len(pre) < 2:
        raise NoPrePeriods(f"need 2 relative periods before {reference}, found {pre}")
    if len(post) < 2:
        raise NoPostPeriods(f"need 2 relative periods after {reference}, found {post}")
    rel_arr = rel.to_numpy(dtype=float, na_value=np.nan)
    dummies = {}
    kept = [v for v in values if v != reference]
    for v in kept:
        dummies[_dummy_name(v)] = (rel_arr == v).astype(float)
    fit = estimate_twfe(ds, outcome, list(covariates) + list(dummies), cluster=cluster,
                        extra_columns=dummies)
    rows = []
    for v in kept:
        c = fit.coefficients.loc[_dummy_name(v)]
        rows.append((v, c["coef"], c["se"], c["ci_low"], c["ci_high"]))
    table = pd.DataFrame(rows, columns=["relative_time", "coef", "se", "ci_low", "ci_high"])
    return EventStudyResult(table, reference, floor_bin, fit.n_obs, fit.n_clusters)


# ---------------------------------------------------------------- resampling


def silverman_bandwidth(x):
    x = np.asarray(x, dtype=float)
    sd = np.std(x, ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * len(x) ** (-0.2)


def gaussian_kde_grid(x, n_grid=512):
    """Gaussian-kernel density on an even grid spanning the data +- 4 bandwidths."""
    x = np.asarray(x, dtype=float)
    x = x[~np.isnan(x)]
    h = silverman_bandwidth(x)
    sd = np.std(x, ddof=1)
    if not h > 0 or not sd > 0:
        # degenerate sample: a narrow spike normalized on its own grid
        h = 1e-8 * (abs(x.mean()) + 1.0)
        grid = np.linspace(x.min() - 4 * h, x.max() + 4 * h, n_grid)
        u = (grid[:, None] - x[None, :]) / h
        return grid, np.exp(-0.5 * u**2).sum(axis=1) / (len(x) * h * math.sqrt(2 * math.pi))
    grid = np.linspace(x.min() - 4 * h, x.max() + 4 * h, n_grid)
    # scipy scales the factor by the sample sd (ddof=1)
    kde = stats.gaussian_kde(x, bw_method=h / sd)
    return grid, kde(grid)


def _map_reps(fn, reps, n_jobs):
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(fn, range(reps)))
    return [fn(r) for r in range(reps)]


def _safe_theta(pipeline, ds):
    try:
        return pipeline(ds).theta
    except SdidmlError:
        return math.nan


def _check_failures(thetas, reps, what):
    failures = int(np.isnan(thetas).sum())
    if failures > 0.1 * reps:
        raise TooManyFailedReps(f"{what}: {failures} of {reps} replications failed")
    return failures


@dataclass
class PlaceboResult:
    observed_theta: float
    thetas: np.ndarray  # NaN marks a failed replication
    p_value: float
    reps: int
    seed: int
    scheme: str
    failures: int = 0

    def density(self, n_grid=512):
        return gaussian_kde_grid(self.thetas, n_grid)

    def to_dict(self):
        return {"observed_theta": self.observed_theta, "p_value": self.p_value, "reps": self.reps,
                "seed": self.seed, "scheme": self.scheme, "failures": self.failures}


def permutation_p_value(observed, thetas):
    """(1 + #{|theta_r| >= |observed|}) / (R + 1) over successful replications."""
    ok = thetas[~np.isnan(thetas)]
    return (1 + int(np.sum(np.abs(ok) >= abs(observed)))) / (len(ok) + 1)


def placebo_permutation(ds: PanelDataset, pipeline: DmlPipeline, reps: int = 500, seed: int = 123,
                        cohorts: Optional[CohortMap] = None, scheme: str = "unit",
                        n_jobs: int = 1) -> PlaceboResult:
    """Null distribution of the estimate under permuted treatment.

    ``scheme="unit"`` shuffles the cohort labels G_i (never-treated included)
    across units, keeping each unit's treatment path absorbing;
    ``scheme="observation"`` shuffles the treatment column across rows.
    Replication r uses the stream (seed, r).
    """
    treatment = ds.roles.treatment
    observed = pipeline(ds).theta
    if cohorts is None:
        cohorts = cohorts_from_treatment(ds, treatment)
    units = sorted(cohorts.entries)
    labels = [cohorts[u] for u in units]
    d_obs = ds.column(treatment)

    def one(r):
        rng = np.random.default_rng([seed, r])
        if scheme == "unit":
            perm = rng.permutation(len(units))
            shuffled = CohortMap({u: labels[j] for u, j in zip(units, perm)})
            d = shuffled.treatment_indicator(ds)
        elif scheme == "observation":
            d = d_obs[rng.permutation(len(d_obs))]
        else:
            raise ValueError(f"unknown permutation scheme {scheme!r}")
        return _safe_theta(pipeline, ds.with_columns({treatment: d}))

    thetas = np.array(_map_reps(one, reps, n_jobs), dtype=float)
    failures = _check_failures(thetas, reps, "placebo")
    return PlaceboResult(observed, thetas, permutation_p_value(observed, thetas), reps, seed,
                         scheme, failures)


@dataclass
class CounterfactualResult:
    observed_theta: float
    thetas: np.ndarray
    mean: float  # normal overlay parameters
    sd: float
    percentile: float  # share of replications at or below the observed estimate
    tail_share: float  # two-sided: share at least as far from the mean as the observed
    grid: np.ndarray
    density: np.ndarray
    reps: int
    seed: int
    failures: int = 0

    def to_dict(self):
        return {"observed_theta": self.observed_theta, "mean": self.mean, "sd": self.sd,
                "percentile": self.percentile, "tail_share": self.tail_share, "reps": self.reps,
                "seed": self.seed, "failures": self.failures}


def counterfactual_timing(ds: PanelDataset, pipeline: DmlPipeline, reps: int = 500, seed: int = 123,
                          cohorts: Optional[CohortMap] = None, n_jobs: int = 1) -> CounterfactualResult:
    """Re-estimate with a random adoption period for every treated unit.

    Each treated unit's period is drawn uniformly from the observed periods;
    never-treated units stay untreated.
    """
    periods = ds.period_values
    if len(periods) < 2:
        raise NoPrePeriods("a single observed period leaves no pre-treatment window")
    treatment = ds.roles.treatment
    if cohorts is None:
        cohorts = cohorts_from_treatment(ds, treatment)
    observed = pipeline(ds).theta
    units = sorted(cohorts.entries)
    treated = np.array([cohorts[u] is not NEVER for u in units])

    def one(r):
        rng = np.random.default_rng([seed, r])
        draws = rng.choice(periods, size=len(units))
        fake = CohortMap({u: int(g) if t else NEVER for u, g, t in zip(units, draws, treated)})
        return _safe_theta(pipeline, ds.with_columns({treatment: fake.treatment_indicator(ds)}))

    thetas = np.array(_map_reps(one, reps, n_jobs), dtype=float)
    failures = _check_failures(thetas, reps, "counterfactual timing")
    ok = thetas[~np.isnan(thetas)]
    mean, sd = float(ok.mean()), float(ok.std(ddof=1)) if len(ok) > 1 else 0.0
    grid, dens = gaussian_kde_grid(ok)
    return CounterfactualResult(
        observed_theta=observed,
        thetas=thetas,
        mean=mean,
        sd=sd,
        percentile=float(np.mean(ok <= observed)),
        tail_share=float(np.mean(np.abs(ok - mean) >= abs(observed - mean))),
        grid=grid,
        density=dens,
        reps=reps,
        seed=seed,
        failures=failures,
    )


@dataclass
class SensitivityRow:
    variant: str
    folds: int
    learner: str
    seed: int
    result: Optional[EstimateResult] = None
    error: Optional[str] = None


@dataclass
class SensitivityTable:
    rows: list = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            rec = {"variant": row.variant, "folds": row.folds, "learner": row.learner,
                   "seed": row.seed}
            res = row.result
            for key in ("theta", "se", "statistic", "p_value", "ci_low", "ci_high"):
                rec[key] = getattr(res, key) if res is not None else math.nan
            rec["error"] = row.error or ""
            records.append(rec)
        return pd.DataFrame(records)


def sensitivity_scan(ds: PanelDataset, base: DmlPipeline, fold_variants: Iterable[int] = (5,),
                     learner_variants: Iterable[LearnerSpec] = (LearnerSpec("forest"),
                                                                LearnerSpec("lasso_cv"))
                     ) -> SensitivityTable:
    """Re-run the pipeline for every (K, learner) pair with the base seed.

    A failing variant is recorded with its error and the scan continues.
    """
    rows = []
    for k in sorted(set(fold_variants)):
        for spec in learner_variants:
            variant = f"K={k}|{spec.descriptor}"
            pipe = replace(base.with_learner(spec), folds=k)
            try:
                rows.append(SensitivityRow(variant, k, spec.descriptor, base.seed, pipe(ds)))
            except SdidmlError as err:
                rows.append(SensitivityRow(variant, k, spec.descriptor, base.seed,
                                           error=f"{type(err).__name__}: {err}"))
    rows.sort(key=lambda r: r.variant)
    return SensitivityTable(rows)
