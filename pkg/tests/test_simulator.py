import math

import numpy as np
import pytest

from conftest import OLS
from sdidml.errors import ConfigInvalid, TooManyFailedReps
from sdidml.estimators import difference_in_means
from sdidml.panel import NEVER, panel_csv_text
from sdidml.pipeline import DmlPipeline
from sdidml.simulator import PROPENSITY_BOUNDS, DgpConfig, generate_panel, outcome_signal, run_monte_carlo


def test_shape_and_roles():
    ds, truth = generate_panel(DgpConfig(n_units=30, n_periods=5, p_covariates=4, seed=1))
    assert ds.n_rows == 150 and len(ds.units) == 30
    assert ds.roles.covariates == ("x1", "x2", "x3", "x4")
    assert ds.roles.instrument is None and ds.roles.moderator is None
    d = ds.frame.pivot(index="unit", columns="period", values="d").to_numpy()
    assert np.all(np.diff(d, axis=1) >= 0)  # absorbing treatment


def test_treatment_follows_truth_cohorts():
    ds, truth = generate_panel(DgpConfig(n_units=40, n_periods=6, seed=2))
    for u, t, d in zip(ds.unit_ids, ds.periods, ds.column("d")):
        g = truth.cohorts[u]
        assert d == (0.0 if g is NEVER else float(t >= g))


def test_noiseless_zero_effect_exact():
    cfg = DgpConfig(n_units=60, n_periods=5, p_covariates=6, theta0=0.0, noise_sd=0.0,
                    fixed_effects=False, seed=3)
    ds, truth = generate_panel(cfg)
    assert np.array_equal(ds.column("y"), truth.g)
    res = DmlPipeline(OLS, OLS, time_effects=False)(ds)
    assert abs(res.theta) < 1e-10


def test_csv_byte_identical():
    cfg = DgpConfig(n_units=20, n_periods=4, p_covariates=3, seed=4, instrument_strength=1.0,
                    effect_heterogeneity=0.5, mediator_a=0.5)
    a = panel_csv_text(generate_panel(cfg)[0])
    b = panel_csv_text(generate_panel(cfg)[0])
    assert a == b
    assert a != panel_csv_text(generate_panel(DgpConfig(n_units=20, n_periods=4, p_covariates=3, seed=5))[0])


def test_overlap_bounds():
    cfg = DgpConfig(n_units=500, confounded_assignment=True, endogeneity=0.9, instrument_strength=3.0,
                    never_share=0.05, seed=6)
    _, truth = generate_panel(cfg)
    p = np.array(list(truth.propensity.values()))
    assert p.min() >= PROPENSITY_BOUNDS[0] and p.max() <= PROPENSITY_BOUNDS[1]


def test_nonlinear_signal_terms():
    x = np.array([[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]])
    assert outcome_signal(x, "linear")[0] == 7.5
    assert outcome_signal(x, "nonlinear")[0] == pytest.approx(7.5 + 1 + math.sin(2.0) + 12)


@pytest.mark.parametrize("kwargs", [
    {"never_share": 1.0}, {"never_share": -0.1}, {"endogeneity": 1.0}, {"cohort_periods": (1,)},
    {"cohort_periods": (9,)}, {"nonlinearity": "cubic"}, {"n_units": 1}, {"noise_sd": -1.0},
])
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigInvalid):
        DgpConfig(**kwargs)


def test_optional_columns():
    cfg = DgpConfig(n_units=20, n_periods=4, p_covariates=3, instrument_strength=1.0,
                    effect_heterogeneity=0.5, mediator_a=0.5, seed=7)
    ds, _ = generate_panel(cfg)
    assert {"z", "w", "m", "group"} <= set(ds.frame.columns)
    assert (ds.roles.instrument, ds.roles.moderator, ds.roles.mediator) == ("z", "w", "m")


def test_monte_carlo_single_rep():
    rep = run_monte_carlo(DgpConfig(n_units=40, n_periods=4, p_covariates=3, seed=8),
                          {"dml": DmlPipeline(OLS, OLS)}, 1)
    row = rep.row("dml")
    assert row["rmse"] == pytest.approx(abs(row["mean_bias"]), abs=1e-15) and row["sd"] == 0


def test_monte_carlo_identities_and_workers():
    cfg = DgpConfig(n_units=40, n_periods=4, p_covariates=3, seed=9)
    est = {"dml": DmlPipeline(OLS, OLS), "naive": difference_in_means}
    a = run_monte_carlo(cfg, est, 12)
    b = run_monte_carlo(cfg, est, 12, n_jobs=3)
    assert a.table.equals(b.table)
    for _, row in a.table.iterrows():
        assert row["rmse"] ** 2 == pytest.approx(row["mean_bias"] ** 2 + row["sd"] ** 2, abs=1e-10)
        assert 0 <= row["coverage"] <= 1


def test_monte_carlo_failures():
    calls = iter(range(1000))

    def flaky(ds):
        if next(calls) % 2:
            raise RuntimeError("boom")
        return DmlPipeline(OLS, OLS)(ds)

    with pytest.raises(TooManyFailedReps):
        run_monte_carlo(DgpConfig(n_units=30, n_periods=4, p_covariates=3), {"f": flaky}, 6)


def test_monte_carlo_tolerates_few_failures():
    def rare(ds):
        if ds.column("y")[0] > 2.5:
            raise RuntimeError("boom")
        return difference_in_means(ds)

    rep = run_monte_carlo(DgpConfig(n_units=30, n_periods=4, p_covariates=3, seed=1), {"r": rare}, 20)
    row = rep.row("r")
    assert row["failures"] <= 2 and row["reps"] == 20
