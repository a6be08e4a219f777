import math

import numpy as np
import pandas as pd
import pytest
import statsmodels.api as sm

from sdidml.crossfit import ResidualizedPanel
from sdidml.errors import (
    CollinearAfterDemeaning,
    DegenerateClusters,
    MissingInstrument,
    NoResidualTreatmentVariation,
    WeakDenominator,
    WeakInstrumentWarning,
)
from sdidml.estimators import demean_two_way, estimate_iv_plr, estimate_plr, estimate_twfe
from sdidml.inference import NORMAL, two_sided_p
from sdidml.panel import PanelDataset


def residuals(y, d, z=None, clusters=None):
    n = len(y)
    return ResidualizedPanel(
        units=np.array([f"u{i}" for i in range(n)]), periods=np.ones(n, dtype=int),
        y_res=np.asarray(y, float), d_res=np.asarray(d, float), fold=np.ones(n, dtype=int),
        clusters=np.arange(n) if clusters is None else np.asarray(clusters), K=2, seed=0,
        specs={}, z_res=None if z is None else np.asarray(z, float))


def test_plr_exact_proportional():
    r = estimate_plr(residuals([2, -2, 4], [1, -1, 2]))
    assert r.theta == 2 and r.se == 0


def test_plr_orthogonal():
    assert estimate_plr(residuals([1, 1, 0], [1, -1, 0.5]), cluster=False).theta == pytest.approx(0, abs=1e-15)


def test_plr_matches_no_intercept_ols_and_hc1():
    rng = np.random.default_rng(0)
    d = rng.normal(size=200)
    y = 0.7 * d + rng.normal(size=200) * (1 + np.abs(d))
    r = estimate_plr(residuals(y, d), cluster=False)
    fit = sm.OLS(y, d).fit(cov_type="HC1")
    assert r.theta == pytest.approx(fit.params[0], abs=1e-12)
    assert r.se == pytest.approx(fit.bse[0], abs=1e-12)
    assert r.p_value == pytest.approx(two_sided_p(r.statistic, NORMAL), abs=1e-6)
    assert r.ci_low <= r.theta <= r.ci_high


def test_plr_cluster_se_matches_statsmodels():
    rng = np.random.default_rng(1)
    g = np.repeat(np.arange(40), 5)
    d = rng.normal(size=200) + rng.normal(size=40)[g]
    y = 0.5 * d + rng.normal(size=200) + rng.normal(size=40)[g]
    r = estimate_plr(residuals(y, d, clusters=g))
    fit = sm.OLS(y, d).fit(cov_type="cluster", cov_kwds={"groups": g, "use_correction": False})
    assert r.se == pytest.approx(fit.bse[0] * math.sqrt(40 / 39), rel=1e-10)
    assert r.n_clusters == 40


def test_scale_equivariance():
    rng = np.random.default_rng(2)
    d, y = rng.normal(size=50), rng.normal(size=50)
    base = estimate_plr(residuals(y, d))
    ys = estimate_plr(residuals(3 * y, d))
    ds_ = estimate_plr(residuals(y, 2 * d))
    assert ys.theta == pytest.approx(3 * base.theta) and ys.se == pytest.approx(3 * base.se)
    assert ds_.theta == pytest.approx(base.theta / 2) and ds_.se == pytest.approx(base.se / 2)
    assert ys.statistic == pytest.approx(base.statistic) and ds_.p_value == pytest.approx(base.p_value)


def test_plr_errors():
    with pytest.raises(NoResidualTreatmentVariation):
        estimate_plr(residuals([1, 2, 3], [0, 0, 0]))
    with pytest.raises(DegenerateClusters):
        estimate_plr(residuals([1, 2, 3], [1, 0, -1], clusters=[1, 1, 1]))


def test_iv_trivial():
    r = estimate_iv_plr(residuals([4, 4], [2, 2], z=[1, 1]), cluster=False)
    assert r.theta == 2


def test_iv_orthogonal_instrument():
    with pytest.raises(WeakDenominator):
        estimate_iv_plr(residuals([1, 2], [1, 1], z=[1, -1]))


def test_iv_missing_instrument():
    with pytest.raises(MissingInstrument):
        estimate_iv_plr(residuals([1, 2], [1, 1]))


def test_iv_weak_warning_and_first_stage():
    rng = np.random.default_rng(3)
    z = rng.normal(size=300)
    d = rng.normal(size=300) + 0.001 * z
    y = d + rng.normal(size=300)
    with pytest.warns(WeakInstrumentWarning):
        r = estimate_iv_plr(residuals(y, d, z=z))
    assert r.diagnostics["weak_instrument"]


def test_iv_matches_just_identified_2sls():
    rng = np.random.default_rng(4)
    z = rng.normal(size=400)
    u = rng.normal(size=400)
    d = z + 0.5 * u + rng.normal(size=400)
    y = 1.5 * d + u
    r = estimate_iv_plr(residuals(y, d, z=z), cluster=False)
    assert r.theta == pytest.approx((z @ y) / (z @ d), abs=1e-12)
    assert r.diagnostics["first_stage_t"] > 10


# ---------------------------------------------------------------- TWFE


def random_panel(rng, n_units=10, n_periods=5, k=3):
    rows = []
    alpha, lam = rng.normal(size=n_units), rng.normal(size=n_periods)
    for i in range(n_units):
        for t in range(n_periods):
            x = rng.normal(size=k)
            rows.append({"unit": f"u{i}", "period": t + 1, "y": x @ [1, -0.5, 0.2] + alpha[i] + lam[t] + rng.normal(),
                         **{f"x{j + 1}": x[j] for j in range(k)}})
    return PanelDataset.from_frame(pd.DataFrame(rows))


def dummy_ols(ds, regs):
    ud = pd.get_dummies(ds.unit_ids, drop_first=True, dtype=float).to_numpy()
    pdm = pd.get_dummies(ds.periods, drop_first=True, dtype=float).to_numpy()
    Z = np.column_stack([ds.matrix(regs), np.ones(ds.n_rows), ud, pdm])
    beta, *_ = np.linalg.lstsq(Z, ds.column("y"), rcond=None)
    return beta[: len(regs)], Z


def test_twfe_matches_dummy_regression_and_cluster_se():
    rng = np.random.default_rng(5)
    ds = random_panel(rng)
    regs = ["x1", "x2", "x3"]
    res = estimate_twfe(ds, "y", regs, cluster=True)
    beta, Z = dummy_ols(ds, regs)
    assert np.allclose(res.coefficients["coef"], beta, atol=1e-8)
    # unit effects nest inside unit clusters: k = 3 slopes + constant + 4 period levels
    codes = pd.factorize(ds.unit_ids)[0]
    fit = sm.OLS(ds.column("y"), Z).fit(cov_type="cluster", cov_kwds={"groups": codes, "use_correction": False})
    n, G, k = ds.n_rows, 10, 3 + 1 + 4
    crude = fit.bse[:3] * math.sqrt(G / (G - 1) * (n - 1) / (n - k))
    assert np.allclose(res.coefficients["se"], crude, rtol=1e-8)
    assert res.df == 9


def test_twfe_singleton_clusters_match_hc1_on_dummies():
    rng = np.random.default_rng(6)
    ds = random_panel(rng)
    res = estimate_twfe(ds, "y", ["x1", "x2", "x3"], cluster=False)
    _, Z = dummy_ols(ds, ["x1", "x2", "x3"])
    fit = sm.OLS(ds.column("y"), Z).fit(cov_type="HC1")
    # singleton clusters nest nothing, so every dummy counts toward k and CR1 is HC1
    assert np.allclose(res.coefficients["se"], fit.bse[:3], rtol=1e-10)


def test_time_invariant_regressor_absorbed():
    rng = np.random.default_rng(7)
    ds = random_panel(rng)
    ds = ds.with_columns({"z": pd.factorize(ds.unit_ids)[0].astype(float)})
    with pytest.raises(CollinearAfterDemeaning) as err:
        estimate_twfe(ds, "y", ["x1", "z"])
    assert err.value.column == "z"


def test_pure_fixed_effects():
    frame = pd.DataFrame({"unit": ["a", "a", "b", "b"], "period": [1, 2, 1, 2],
                          "x": [0.3, -1.0, 2.0, 0.5]})
    frame["y"] = frame["unit"].map({"a": 1.0, "b": -2.0}) + frame["period"].map({1: 0.5, 2: 3.0})
    for cluster in (True, False):
        res = estimate_twfe(PanelDataset.from_frame(frame), "y", ["x"], cluster=cluster)
        assert res.coef("x") == pytest.approx(0, abs=1e-10)
        assert np.allclose(res.residuals, 0, atol=1e-10)


def test_demeaning_idempotent():
    rng = np.random.default_rng(8)
    u = np.repeat(np.arange(6), 4)
    t = np.tile(np.arange(4), 6)
    x = rng.normal(size=24)
    once, _, _ = demean_two_way(x, u, t)
    twice, _, change = demean_two_way(once, u, t)
    assert np.max(np.abs(twice - once)) < 1e-14


def test_unbalanced_demeaning_converges():
    rng = np.random.default_rng(9)
    ds = random_panel(rng, 12, 6)
    ds = ds.take_rows(rng.random(ds.n_rows) > 0.2)
    res = estimate_twfe(ds, "y", ["x1", "x2"])
    beta, _ = dummy_ols(ds, ["x1", "x2"])
    assert np.allclose(res.coefficients["coef"], beta, atol=1e-8)
    assert res.max_change < 1e-10


def test_result_serialization_keys(sim_linear, ols_pipeline):
    ds, _ = sim_linear
    keys = list(ols_pipeline(ds).to_dict())
    assert keys[:13] == ["theta", "se", "statistic", "p_value", "ci_low", "ci_high", "n_obs",
                         "n_clusters", "df", "method", "learners", "folds", "seed"]


def test_summary_line_format():
    r = estimate_plr(residuals([1.0, 2.2, -0.3, 0.9], [1.0, 2.0, -1.0, 0.4]), cluster=False)
    line = r.summary_line()
    assert line.startswith("θ=") and ", SE=" in line and ", z=" in line and "95% CI [" in line
