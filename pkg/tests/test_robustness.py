import math

import numpy as np
import pandas as pd
import pytest
from scipy import integrate

from conftest import OLS, small_panel
from sdidml.errors import NoControlUnits, NoPrePeriods, TooManyFailedReps
from sdidml.estimators import estimate_twfe
from sdidml.learners import LearnerSpec
from sdidml.panel import NEVER, CohortMap, PanelDataset, RoleMap
from sdidml.pipeline import DmlPipeline
from sdidml.robustness import (
    NoPostPeriods,
    counterfactual_timing,
    event_study,
    gaussian_kde_grid,
    permutation_p_value,
    placebo_permutation,
    sensitivity_scan,
    silverman_bandwidth,
)
from sdidml.simulator import DgpConfig, generate_panel

PIPE = DmlPipeline(OLS, OLS)


def event_panel(seed, theta0=1.0, n_units=120):
    cfg = DgpConfig(n_units=n_units, n_periods=10, p_covariates=3, theta0=theta0,
                    cohort_periods=(6, 7, 8), seed=seed)
    return generate_panel(cfg)


def test_event_study_recovers_constant_effect():
    ds, truth = event_panel(1, n_units=400)
    es = event_study(ds, truth.cohorts, covariates=["x1", "x2", "x3"])
    t = es.table
    assert -1 not in t["relative_time"].tolist()
    assert list(t["relative_time"]) == sorted(t["relative_time"])
    assert t["relative_time"].min() == -4
    pre, post = t[t.relative_time < -1], t[t.relative_time >= 0]
    assert np.all(np.abs(pre["coef"]) < 0.3)
    assert np.all(np.abs(post["coef"] - 1) < 0.3)
    assert np.all((t.ci_low <= t.coef) & (t.coef <= t.ci_high))
    assert es.n_clusters == 400


def test_event_study_floor_bin_pooling():
    ds, truth = event_panel(2)
    es = event_study(ds, truth.cohorts, floor_bin=-4)
    # manual oracle: one dummy for all distances <= -4
    rel = np.array([np.nan if truth.cohorts[u] is NEVER else t - truth.cohorts[u]
                    for u, t in zip(ds.unit_ids, ds.periods)])
    assert np.nanmin(rel) <= -6
    binned = np.where(rel <= -4, -4, rel)
    cols = {f"k{int(v) + 10}": (binned == v).astype(float) for v in sorted(set(binned[~np.isnan(binned)])) if v != -1}
    fit = estimate_twfe(ds, "y", list(cols), extra_columns=cols)
    assert es.coef(-4) == pytest.approx(fit.coef("k6"), abs=1e-10)
    assert es.coef(2) == pytest.approx(fit.coef("k12"), abs=1e-10)


def test_event_study_level_shift_invariance():
    ds, truth = event_panel(3)
    shifted = ds.with_columns({"y": ds.column("y") + 17.5})
    a = event_study(ds, truth.cohorts).table
    b = event_study(shifted, truth.cohorts).table
    assert np.allclose(a["coef"], b["coef"], atol=1e-9)


def test_event_study_errors():
    ds, truth = event_panel(4)
    with pytest.raises(NoControlUnits):
        event_study(ds, CohortMap({u: 6 for u in ds.units}))
    late = CohortMap({u: (2 if g is not NEVER else NEVER) for u, g in truth.cohorts.entries.items()})
    with pytest.raises(NoPrePeriods):
        event_study(ds, late)
    early = CohortMap({u: (10 if g is not NEVER else NEVER) for u, g in truth.cohorts.entries.items()})
    with pytest.raises(NoPostPeriods):
        event_study(ds, early)


def test_parallel_trends_pre_coefficients_centered():
    means = []
    for seed in range(20):
        ds, truth = event_panel(100 + seed, theta0=0.0, n_units=500)
        t = event_study(ds, truth.cohorts).table
        means.append(t.loc[t.relative_time < -1, "coef"].to_numpy())
    assert np.all(np.abs(np.mean(means, axis=0)) < 0.05)


# ---------------------------------------------------------------- placebo


def test_p_value_convention():
    thetas = np.linspace(-0.5, 0.5, 500)
    assert permutation_p_value(3.0, thetas) == pytest.approx(1 / 501)
    assert permutation_p_value(0.0, thetas) == 1.0
    assert permutation_p_value(3.0, np.array([np.nan, 4.0, 1.0])) == pytest.approx(2 / 3)


def test_placebo_determinism_and_workers(sim_linear):
    ds, _ = sim_linear
    a = placebo_permutation(ds, PIPE, reps=30, seed=5)
    b = placebo_permutation(ds, PIPE, reps=30, seed=5, n_jobs=3)
    assert np.array_equal(a.thetas, b.thetas) and a.p_value == b.p_value
    c = placebo_permutation(ds, PIPE, reps=30, seed=6)
    assert not np.array_equal(a.thetas, c.thetas)
    assert a.p_value == permutation_p_value(a.observed_theta, a.thetas)


def test_unit_scheme_keeps_paths_absorbing(sim_linear, monkeypatch):
    ds, _ = sim_linear
    seen = []

    class Spy:
        def __call__(self, data):
            seen.append(data.column("d").copy())
            return PIPE(data)

    placebo_permutation(ds, Spy(), reps=5, seed=1)
    for d in seen[1:]:
        wide = pd.DataFrame({"u": ds.unit_ids, "t": ds.periods, "d": d}).pivot(index="u", columns="t", values="d")
        assert np.all(np.diff(wide.to_numpy(), axis=1) >= 0)
        assert d.sum() != 0


def test_observation_scheme_runs(sim_linear):
    ds, _ = sim_linear
    r = placebo_permutation(ds, PIPE, reps=10, seed=2, scheme="observation")
    assert r.scheme == "observation" and np.all(np.isfinite(r.thetas))


def test_placebo_relabel_invariance(sim_linear):
    ds, _ = sim_linear
    renamed = ds.frame.assign(unit="id_" + ds.frame["unit"])  # order-preserving relabel
    ds2 = PanelDataset.from_frame(renamed, roles=ds.roles)
    a = placebo_permutation(ds, PIPE, reps=25, seed=3)
    b = placebo_permutation(ds2, PIPE, reps=25, seed=3)
    assert np.allclose(a.thetas, b.thetas, atol=1e-12) and a.p_value == b.p_value


def test_placebo_too_many_failures(sim_linear):
    ds, _ = sim_linear
    calls = {"n": 0}

    def flaky(data):
        calls["n"] += 1
        if calls["n"] > 1 and calls["n"] % 3 == 0:
            from sdidml.errors import NoResidualTreatmentVariation
            raise NoResidualTreatmentVariation("x")
        return PIPE(data)

    with pytest.raises(TooManyFailedReps):
        placebo_permutation(ds, flaky, reps=12, seed=1)


def test_placebo_monotone_evidence():
    mean_p = []
    for theta0 in (0.0, 0.5, 1.0):
        ps = []
        for rep in range(50):
            ds, _ = generate_panel(DgpConfig(n_units=40, n_periods=5, p_covariates=3, theta0=theta0,
                                             seed=1000 + rep))
            ps.append(placebo_permutation(ds, PIPE, reps=19, seed=rep).p_value)
        mean_p.append(np.mean(ps))
    assert mean_p[0] > mean_p[1] > mean_p[2]


# ---------------------------------------------------------------- counterfactual


def test_counterfactual_outputs(sim_linear):
    ds, _ = sim_linear
    r = counterfactual_timing(ds, PIPE, reps=40, seed=9)
    assert len(r.thetas) == 40 and r.failures == 0
    assert r.mean == pytest.approx(np.mean(r.thetas)) and r.sd == pytest.approx(np.std(r.thetas, ddof=1))
    assert 0 <= r.percentile <= 1 and 0 <= r.tail_share <= 1
    assert integrate.trapezoid(r.density, r.grid) == pytest.approx(1, abs=1e-3)
    again = counterfactual_timing(ds, PIPE, reps=40, seed=9, n_jobs=2)
    assert np.array_equal(r.thetas, again.thetas)


def test_counterfactual_single_period():
    frame = pd.DataFrame({"unit": list("abcd"), "period": 1, "y": [1.0, 2, 3, 4], "d": [0.0, 1, 0, 1],
                          "x": [1.0, 0, 2, 1]})
    ds = PanelDataset.from_frame(frame, roles=RoleMap("y", "d", ("x",)))
    with pytest.raises(NoPrePeriods):
        counterfactual_timing(ds, PIPE, reps=5)


def test_counterfactual_null_percentile_calibrated():
    inside = 0
    outer = 40
    for rep in range(outer):
        ds, _ = generate_panel(DgpConfig(n_units=40, n_periods=5, p_covariates=3, theta0=0.0,
                                         cohort_periods=(2, 3, 4, 5), seed=2000 + rep))
        r = counterfactual_timing(ds, PIPE, reps=39, seed=rep)
        inside += 0.025 <= r.percentile <= 0.975
    assert inside / outer >= 0.85


def test_kde_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.normal(size=300)
    grid, dens = gaussian_kde_grid(x, 256)
    h = silverman_bandwidth(x)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    assert h == pytest.approx(0.9 * min(np.std(x, ddof=1), iqr / 1.34) * 300 ** -0.2)
    direct = np.exp(-0.5 * ((grid[:, None] - x) / h) ** 2).sum(1) / (300 * h * math.sqrt(2 * math.pi))
    assert np.allclose(dens, direct, atol=1e-12)
    assert integrate.trapezoid(dens, grid) == pytest.approx(1, abs=1e-3)


def test_kde_degenerate_sample():
    grid, dens = gaussian_kde_grid(np.full(10, 2.0))
    assert integrate.trapezoid(dens, grid) == pytest.approx(1, abs=1e-3)


# ---------------------------------------------------------------- sensitivity


def test_sensitivity_product_and_stability():
    ds, _ = generate_panel(DgpConfig(n_units=100, n_periods=6, p_covariates=5, seed=21))
    learners = (LearnerSpec("forest", n_trees=30), LearnerSpec("lasso_cv"))
    table = sensitivity_scan(ds, PIPE, fold_variants=(3, 5), learner_variants=learners)
    frame = table.to_frame()
    assert len(frame) == 4 and list(frame["variant"]) == sorted(frame["variant"])
    assert set(frame["seed"]) == {PIPE.seed}
    assert (frame["error"] == "").all()
    th, se = frame["theta"].to_numpy(), frame["se"].to_numpy()
    assert np.all(np.abs(th[:, None] - th[None, :]) <= 3 * np.maximum(se[:, None], se[None, :]))


def test_sensitivity_default_pair_and_inline_errors(panel):
    table = sensitivity_scan(panel, PIPE, fold_variants=(5, 99),
                             learner_variants=(LearnerSpec("forest"), LearnerSpec("lasso_cv")))
    frame = table.to_frame()
    assert len(frame) == 4
    assert frame.loc[frame.folds == 99, "error"].str.contains("TooFewUnits").all()
    defaults = sensitivity_scan(small_panel(n_units=30), PIPE)
    assert [r.variant for r in defaults.rows] == ["K=5|forest", "K=5|lasso_cv"]
