"""S-DIDML: staggered difference-in-differences with double machine learning.

Panel ingestion, cross-fitted nuisance learners, partially linear and IV
DML estimators, a two-way fixed-effects benchmark, diagnostics, robustness
checks, mechanism analysis and a simulation oracle.
"""

__version__ = "0.1.0"

from .crossfit import assign_folds, out_of_fold_predict, residualize
from .errors import SdidmlError
from .estimators import (
    EstimateResult,
    difference_in_means,
    estimate_iv_plr,
    estimate_plr,
    estimate_twfe,
)
from .inference import NORMAL, summarize_inference
from .learners import LearnerSpec, fit, parse_learner, predict
from .panel import NEVER, CohortMap, PanelDataset, RoleMap, assign_roles, load_panel_csv
from .pipeline import DmlPipeline
from .simulator import DgpConfig, generate_panel, run_monte_carlo

__all__ = [
    "NEVER", "NORMAL", "CohortMap", "DgpConfig", "DmlPipeline", "EstimateResult", "LearnerSpec",
    "PanelDataset", "RoleMap", "SdidmlError", "assign_folds", "assign_roles",
    "difference_in_means", "estimate_iv_plr", "estimate_plr", "estimate_twfe", "fit",
    "generate_panel", "load_panel_csv", "out_of_fold_predict", "parse_learner", "predict",
    "residualize", "run_monte_carlo", "summarize_inference",
]
