import warnings

import numpy as np
import pandas as pd
import pytest

from sdidml.learners import LearnerSpec
from sdidml.panel import PanelDataset, RoleMap
from sdidml.pipeline import DmlPipeline
from sdidml.simulator import DgpConfig, generate_panel

OLS = LearnerSpec("ols")


@pytest.fixture
def write_csv(tmp_path):
    def _write(text, name="panel.csv"):
        path = tmp_path / name
        path.write_text(text)
        return path
    return _write


def small_panel(n_units=6, n_periods=5, seed=0, cohorts=None):
    """Random balanced panel with columns y, d, x1, x2 and first-period map."""
    rng = np.random.default_rng(seed)
    cohorts = cohorts or {f"u{i}": (3 if i % 2 else None) for i in range(n_units)}
    rows = []
    for i in range(n_units):
        u = f"u{i}"
        g = cohorts.get(u)
        for t in range(1, n_periods + 1):
            rows.append({"unit": u, "period": t, "y": rng.normal(), "d": float(g is not None and t >= g),
                         "x1": rng.normal(), "x2": rng.normal()})
    frame = pd.DataFrame(rows)
    return PanelDataset.from_frame(frame, "unit", "period", RoleMap("y", "d", ("x1", "x2")))


@pytest.fixture
def panel():
    return small_panel()


@pytest.fixture(scope="session")
def sim_linear():
    ds, truth = generate_panel(DgpConfig(n_units=80, n_periods=6, p_covariates=5, seed=11))
    return ds, truth


@pytest.fixture
def ols_pipeline():
    return DmlPipeline(OLS, OLS, folds=5, seed=42)


@pytest.fixture(autouse=True)
def _quiet_panel_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        yield
