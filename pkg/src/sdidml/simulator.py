"""Synthetic staggered-adoption panels with a known effect, and a Monte Carlo
harness that scores estimators against it.

Model, per unit i and period t = 1..T::

    Y_it = theta0 * D_it + het * W_it * D_it + g(X_it) + alpha_i + lambda_t + eps_it
    D_it = 1{t >= G_i}

Covariates follow a stationary AR(1) within unit (persistence 0.5, unit
variance). Whether a unit is ever treated is drawn from a clipped logistic
index when confounding, endogeneity or an instrument is switched on, and
with probability ``1 - never_share`` otherwise; treated units pick their
adoption period uniformly from ``cohort_periods``. With the mediator on,
``theta0`` is the direct effect and the total effect is theta0 + a * b.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Optional

import numpy as np
import pandas as pd

from .crossfit import derive_seed
from .errors import ConfigInvalid, TooManyFailedReps
from .panel import NEVER, CohortMap, PanelDataset, RoleMap

AR_PERSISTENCE = 0.5
PROPENSITY_BOUNDS = (0.05, 0.95)
CONFOUNDING_WEIGHT = 1.5
INSTRUMENT_WEIGHT = 3.0
ENDOGENEITY_WEIGHT = 1.5


@dataclass(frozen=True)
class DgpConfig:
    n_units: int = 200
    n_periods: int = 8
    p_covariates: int = 20
    theta0: float = 1.0
    cohort_periods: Optional[tuple] = None  # default: second half of the window
    never_share: float = 0.4
    nonlinearity: str = "linear"
    confounded_assignment: bool = False
    effect_heterogeneity: Optional[float] = None
    endogeneity: Optional[float] = None
    instrument_strength: Optional[float] = None
    noise_sd: float = 1.0
    fixed_effects: bool = True
    mediator_a: Optional[float] = None  # D -> M slope; adds a mediator column m
    mediator_b: float = 1.0  # M -> Y slope when the mediator is on
    seed: int = 0

    def __post_init__(self):
        if self.cohort_periods is not None:
            object.__setattr__(self, "cohort_periods", tuple(int(g) for g in self.cohort_periods))
        problems = []
        if self.n_units < 2 or self.n_periods < 2:
            problems.append("need at least 2 units and 2 periods")
        if self.p_covariates < 1:
            problems.append("p_covariates must be positive")
        if not 0 <= self.never_share < 1:
            problems.append("never_share must lie in [0, 1)")
        if self.nonlinearity not in ("linear", "nonlinear"):
            problems.append("nonlinearity must be 'linear' or 'nonlinear'")
        if self.endogeneity is not None and not abs(self.endogeneity) < 1:
            problems.append("|endogeneity| must be below 1")
        if self.noise_sd < 0:
            problems.append("noise_sd must be non-negative")
        if any(not 1 < g <= self.n_periods for g in self.cohorts):
            problems.append(f"cohort periods must lie in (1, {self.n_periods}]")
        if problems:
            raise ConfigInvalid("; ".join(problems))

    @property
    def cohorts(self):
        if self.cohort_periods is not None:
            return self.cohort_periods
        start = max(2, self.n_periods // 2 + 1)
        return tuple(range(start, self.n_periods + 1))

    def to_dict(self):
        out = asdict(self)
        out["cohort_periods"] = list(self.cohorts)
        return out


@dataclass
class SimulatedTruth:
    theta0: float
    cohorts: CohortMap
    propensity: dict  # unit -> probability of ever being treated
    g: np.ndarray  # g(X_it) per row, aligned with the dataset
    assignment_index: dict  # unit -> logistic index (None when assignment is unconfounded)


def _expit(x):
    return 1.0 / (1.0 + np.exp(-x))


def outcome_signal(x, nonlinearity):
    """g(X): half the sum of the first five covariates, plus x1^2, sin(x2)
    and x3*x4 in the nonlinear design."""
    p = x.shape[-1]
    g = 0.5 * x[..., : min(5, p)].sum(axis=-1)
    if nonlinearity == "nonlinear":
        g = g + x[..., 0] ** 2
        if p > 1:
            g = g + np.sin(x[..., 1])
        if p > 3:
            g = g + x[..., 2] * x[..., 3]
    return g


def generate_panel(cfg: DgpConfig):
    """Draw one panel; returns ``(dataset, truth)``.

    Every random component is drawn in a fixed order whatever the switches,
    so two configs that differ only in a switch share all other draws.
    """
    rng = np.random.default_rng(cfg.seed)
    N, T, p = cfg.n_units, cfg.n_periods, cfg.p_covariates

    x = np.empty((N, T, p))
    x[:, 0] = rng.standard_normal((N, p))
    innov = rng.standard_normal((N, T, p))
    scale = math.sqrt(1 - AR_PERSISTENCE**2)
    for t in range(1, T):
        x[:, t] = AR_PERSISTENCE * x[:, t - 1] + scale * innov[:, t]
    alpha = rng.standard_normal(N)
    lam = rng.standard_normal(T)
    eta = rng.standard_normal(N)  # exogenous assignment shock, drives the instrument
    shock = rng.standard_normal(N)  # assignment shock shared with the outcome error
    e = rng.standard_normal((N, T))
    z_noise = rng.standard_normal((N, T))
    w = rng.standard_normal((N, T))
    group = (rng.random(N) < 0.5).astype(float)
    u_ever = rng.random(N)
    cohort_draw = rng.integers(0, len(cfg.cohorts), N)
    m_noise = rng.standard_normal((N, T))

    if not cfg.fixed_effects:
        alpha = np.zeros(N)
        lam = np.zeros(T)

    index = None
    active = cfg.confounded_assignment or cfg.endogeneity is not None or cfg.instrument_strength is not None
    if active:
        index = np.full(N, math.log((1 - cfg.never_share) / cfg.never_share)
                        if cfg.never_share > 0 else 4.0)
        if cfg.confounded_assignment:
            s = x[:, :, : min(3, p)].sum(axis=2).mean(axis=1)
            index += CONFOUNDING_WEIGHT * s / s.std()
        if cfg.instrument_strength is not None:
            index += INSTRUMENT_WEIGHT * eta
        if cfg.endogeneity is not None:
            index += ENDOGENEITY_WEIGHT * shock
        prob = np.clip(_expit(index), *PROPENSITY_BOUNDS)
    else:
        prob = np.full(N, 1 - cfg.never_share)
    ever = u_ever < prob
    first = np.where(ever, np.asarray(cfg.cohorts)[cohort_draw], 0)

    periods = np.arange(1, T + 1)
    d = (ever[:, None] & (periods[None, :] >= first[:, None])).astype(float)
    g = outcome_signal(x, cfg.nonlinearity)
    if cfg.endogeneity is not None:
        rho = cfg.endogeneity
        eps = cfg.noise_sd * (rho * shock[:, None] + math.sqrt(1 - rho**2) * e)
    else:
        eps = cfg.noise_sd * e
    effect = cfg.theta0 + (cfg.effect_heterogeneity or 0.0) * w
    y = effect * d + g + alpha[:, None] + lam[None, :] + eps
    if cfg.mediator_a is not None:
        m = cfg.mediator_a * d + m_noise
        y = y + cfg.mediator_b * m

    width = len(str(N))
    units = [f"u{i + 1:0{width}d}" for i in range(N)]
    cols = {
        "unit": np.repeat(units, T),
        "period": np.tile(periods, N),
        "y": y.ravel(),
        "d": d.ravel(),
    }
    names = [f"x{j + 1}" for j in range(p)]
    for j, name in enumerate(names):
        cols[name] = x[:, :, j].ravel()
    if cfg.instrument_strength is not None:
        cols["z"] = (cfg.instrument_strength * eta[:, None] + z_noise).ravel()
    if cfg.effect_heterogeneity is not None:
        cols["w"] = w.ravel()
    if cfg.mediator_a is not None:
        cols["m"] = m.ravel()
    cols["group"] = np.repeat(group, T)
    cols["cohort"] = np.repeat(np.where(ever, first, np.nan), T)
    frame = pd.DataFrame(cols)

    roles = RoleMap(
        outcome="y",
        treatment="d",
        covariates=names,
        instrument="z" if cfg.instrument_strength is not None else None,
        moderator="w" if cfg.effect_heterogeneity is not None else None,
        mediator="m" if cfg.mediator_a is not None else None,
        group="group",
    )
    ds = PanelDataset.from_frame(frame, "unit", "period", roles)
    cohorts = CohortMap({u: (int(f) if ev else NEVER) for u, f, ev in zip(units, first, ever)})
    truth = SimulatedTruth(
        theta0=cfg.theta0,
        cohorts=cohorts,
        propensity=dict(zip(units, prob.tolist())),
        g=g.ravel(),
        assignment_index=dict(zip(units, index.tolist())) if index is not None else None,
    )
    return ds, truth


@dataclass
class MonteCarloReport:
    theta0: float
    reps: int
    table: pd.DataFrame  # one row per estimator
    estimates: dict = field(default_factory=dict)  # name -> per-rep theta (NaN on failure)
    ses: dict = field(default_factory=dict)
    covered: dict = field(default_factory=dict)

    def row(self, name):
        return self.table.set_index("estimator").loc[name]


def _summarize(name, theta0, thetas, ses, covered, reps, failures):
    ok = ~np.isnan(thetas)
    est = thetas[ok]
    err = est - theta0
    bias = float(err.mean()) if est.size else math.nan
    return {
        "estimator": name,
        "reps": reps,
        "failures": failures,
        "mean_bias": bias,
        "rmse": float(math.sqrt(np.mean(err**2))) if est.size else math.nan,
        "mean_se": float(np.mean(ses[ok])) if est.size else math.nan,
        "sd": float(np.std(est)) if est.size else math.nan,
        "coverage": float(np.mean(covered[ok])) if est.size else math.nan,
    }


def run_monte_carlo(cfg: DgpConfig, estimators: Mapping[str, Callable], reps: int,
                    n_jobs: int = 1, max_failure_share: float = 0.1) -> MonteCarloReport:
    """Score each estimator over ``reps`` simulated panels.

    Replication r draws its panel with seed derived from (cfg.seed, r); all
    estimators see the same panel. ``sd`` is the population standard
    deviation of the estimates, so rmse^2 = bias^2 + sd^2.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    names = list(estimators)

    def one(r):
        ds, truth = generate_panel(replace(cfg, seed=derive_seed(cfg.seed, r)))
        out = []
        for name in names:
            try:
                res = estimators[name](ds)
                out.append((res.theta, res.se, res.ci_low <= truth.theta0 <= res.ci_high))
            except Exception:  # counted as a failed replication
                out.append(None)
        return out

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, range(reps)))
    else:
        results = [one(r) for r in range(reps)]

    rows, estimates, ses, covered = [], {}, {}, {}
    for k, name in enumerate(names):
        th = np.array([np.nan if r[k] is None else r[k][0] for r in results])
        se = np.array([np.nan if r[k] is None else r[k][1] for r in results])
        cov = np.array([False if r[k] is None else r[k][2] for r in results])
        failures = int(np.isnan(th).sum())
        if failures > max_failure_share * reps:
            raise TooManyFailedReps(f"{name}: {failures} of {reps} replications failed")
        rows.append(_summarize(name, cfg.theta0, th, se, cov, reps, failures))
        estimates[name], ses[name], covered[name] = th, se, cov
    return MonteCarloReport(cfg.theta0, reps, pd.DataFrame(rows), estimates, ses, covered)
