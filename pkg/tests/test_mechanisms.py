from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import statsmodels.api as sm

from conftest import OLS
from sdidml.errors import ConstantMediator, ConstantModerator, GroupTooSmall, MissingColumn
from sdidml.estimators import estimate_twfe
from sdidml.mechanisms import mediation, moderation, ols_cluster, subgroup_compare
from sdidml.panel import PanelDataset
from sdidml.pipeline import DmlPipeline
from sdidml.simulator import DgpConfig, generate_panel

PIPE = DmlPipeline(OLS, OLS)
BASE = DgpConfig(n_units=250, n_periods=8, p_covariates=5, seed=1)


def with_roles(ds, **kw):
    return PanelDataset.from_frame(ds.frame, ds.unit_col, ds.time_col, replace(ds.roles, **kw))


# ---------------------------------------------------------------- moderation


def test_moderation_recovers_interaction():
    ds, _ = generate_panel(replace(BASE, effect_heterogeneity=0.5))
    res = moderation(ds)
    assert abs(res.interaction.coef - 0.5) < 3 * res.interaction.se
    assert abs(res.main.coef - 1.0) < 3 * res.main.se
    assert res.interaction_name == "d_x_w" and res.moderator_main is not None


def test_moderation_constant_w():
    ds, _ = generate_panel(replace(BASE, n_units=30, effect_heterogeneity=0.5))
    flat = with_roles(ds.with_columns({"w": np.full(ds.n_rows, 2.0)}))
    with pytest.raises(ConstantModerator):
        moderation(flat)


def test_moderation_missing_role(sim_linear):
    ds, _ = sim_linear
    with pytest.raises(MissingColumn):
        moderation(ds)


def test_moderation_centering_identity():
    ds, _ = generate_panel(replace(BASE, n_units=60, effect_heterogeneity=0.5))
    w = ds.column("w")
    centered = ds.with_columns({"w": w - w.mean()})
    raw, cen = moderation(ds), moderation(centered)
    assert cen.interaction.coef == pytest.approx(raw.interaction.coef, abs=1e-8)
    assert cen.main.coef == pytest.approx(raw.main.coef + raw.interaction.coef * w.mean(), abs=1e-8)


def test_moderation_is_twfe_with_product_column():
    ds, _ = generate_panel(replace(BASE, n_units=60, effect_heterogeneity=0.5))
    res = moderation(ds)
    extra = {"dw": ds.column("d") * ds.column("w")}
    fit = estimate_twfe(ds, "y", ["d", "dw", "w", *ds.roles.covariates], extra_columns=extra)
    assert np.array_equal(res.twfe.coefficients["coef"].to_numpy(), fit.coefficients["coef"].to_numpy())


def test_moderation_unit_fixed_moderator_absorbed():
    ds, _ = generate_panel(replace(BASE, n_units=60, effect_heterogeneity=0.5))
    fixed = with_roles(ds, moderator="group", group=None)
    res = moderation(fixed)
    assert res.moderator_main is None and np.isfinite(res.interaction.se)


# ---------------------------------------------------------------- mediation


def test_mediation_null_b_path():
    small = 0
    for rep in range(100):
        ds, _ = generate_panel(replace(BASE, n_units=60, mediator_a=1.0, mediator_b=0.0, seed=300 + rep))
        small += abs(mediation(ds).indirect_z) < 2
    assert small >= 90


def test_mediation_fully_mediated():
    ds, _ = generate_panel(replace(BASE, theta0=0.0, mediator_a=1.0, mediator_b=1.0))
    res = mediation(ds)
    assert abs(res.indirect - 1) < 3 * res.indirect_se
    assert abs(res.total.coef - 1) < 3 * res.total.se
    assert abs(res.direct.coef) < 3 * res.direct.se
    assert abs(res.total.coef - res.direct.coef - res.indirect) < 3 * np.hypot(res.total.se, res.indirect_se)


def test_mediation_zero_a():
    ds, _ = generate_panel(replace(BASE, mediator_a=0.0, mediator_b=1.0))
    res = mediation(ds)
    assert abs(res.a.coef) < 3 * res.a.se
    assert res.indirect == pytest.approx(res.a.coef * res.b.coef)


def test_mediation_sobel_formula():
    ds, _ = generate_panel(replace(BASE, n_units=60, mediator_a=0.7))
    r = mediation(ds)
    assert r.indirect_se == pytest.approx(np.sqrt(r.a.coef**2 * r.b.se**2 + r.b.coef**2 * r.a.se**2))


def test_mediation_exact_identity_without_fixed_effects():
    ds, _ = generate_panel(replace(BASE, n_units=60, mediator_a=0.7))
    r = mediation(ds, fixed_effects=False)
    assert r.total.coef == pytest.approx(r.direct.coef + r.indirect, abs=1e-8)


def test_ols_cluster_matches_statsmodels():
    ds, _ = generate_panel(replace(BASE, n_units=60))
    tab = ols_cluster(ds, "y", ["d", "x1"])
    X = sm.add_constant(np.column_stack([ds.column("d"), ds.column("x1")]))
    codes = pd.factorize(ds.unit_ids)[0]
    fit = sm.OLS(ds.column("y"), X).fit(cov_type="cluster", cov_kwds={"groups": codes})
    assert np.allclose(tab["coef"], fit.params, atol=1e-10)
    assert np.allclose(tab["se"], fit.bse, rtol=1e-8)


def test_mediation_bootstrap_deterministic():
    ds, _ = generate_panel(replace(BASE, n_units=40, p_covariates=2, mediator_a=1.0))
    a = mediation(ds, method="bootstrap", reps=60, seed=4)
    b = mediation(ds, method="bootstrap", reps=60, seed=4)
    sobel = mediation(ds)
    assert a.indirect_se == b.indirect_se and a.bootstrap_reps == 60
    assert 0.5 < a.indirect_se / sobel.indirect_se < 2


def test_mediation_constant():
    ds, _ = generate_panel(replace(BASE, n_units=30, mediator_a=1.0))
    with pytest.raises(ConstantMediator):
        mediation(ds.with_columns({"m": np.zeros(ds.n_rows)}))


# ---------------------------------------------------------------- subgroups


def stack(a, b):
    fa = a.frame.assign(unit="a" + a.frame["unit"], group=0.0)
    fb = b.frame.assign(unit="b" + b.frame["unit"], group=1.0)
    return PanelDataset.from_frame(pd.concat([fa, fb], ignore_index=True), roles=a.roles)


def test_subgroup_null_difference():
    inside = 0
    cfg = DgpConfig(n_units=30, n_periods=5, p_covariates=3)
    for rep in range(200):
        ds = stack(generate_panel(replace(cfg, seed=2 * rep))[0], generate_panel(replace(cfg, seed=2 * rep + 1))[0])
        diff = subgroup_compare(ds, "group", PIPE).differences[0]
        inside += abs(diff.delta) < 2 * diff.se
    assert 0.9 <= inside / 200 <= 0.99


def test_subgroup_power():
    hits = 0
    for rep in range(30):
        a, _ = generate_panel(DgpConfig(n_units=125, n_periods=8, p_covariates=5, theta0=1.0, seed=rep))
        b, _ = generate_panel(DgpConfig(n_units=125, n_periods=8, p_covariates=5, theta0=0.0, seed=500 + rep))
        res = subgroup_compare(stack(a, b), "group", PIPE)
        d = res.differences[0]
        assert d.se == pytest.approx(np.hypot(res.groups["0"].se, res.groups["1"].se))
        hits += d.p_value < 0.05
    assert hits / 30 >= 0.8


def test_subgroup_too_small():
    a, _ = generate_panel(DgpConfig(n_units=30, n_periods=4, p_covariates=3, seed=1))
    b, _ = generate_panel(DgpConfig(n_units=4, n_periods=4, p_covariates=3, seed=2))
    with pytest.raises(GroupTooSmall) as err:
        subgroup_compare(stack(a, b), "group", PIPE)
    assert (err.value.group, err.value.required, err.value.available) == ("1", 10, 4)


def test_subgroup_serialization(sim_linear):
    ds, _ = sim_linear
    out = subgroup_compare(ds, "group", PIPE).to_dict()
    assert set(out["groups"]) == {"0", "1"} and "independent" in out["assumption"]
