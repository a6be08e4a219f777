"""The end-to-end S-DIDML estimator: fold assignment, residualization and the
orthogonal-score estimate, bundled as one reusable configuration."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from .crossfit import assign_folds, assign_observation_folds, residualize
from .estimators import EstimateResult, estimate_iv_plr, estimate_plr
from .learners import LearnerSpec
from .panel import PanelDataset


@dataclass(frozen=True)
class DmlPipeline:
    """Partially linear DML on a panel.

    With ``z_learner`` set the instrument is residualized as well and the
    IV score is used. ``time_effects`` removes period means from Y, D (and Z)
    before cross-fitting. ``fold_level="observation"`` reproduces row-level
    fold assignment instead of the default unit-level one.
    """

    y_learner: LearnerSpec
    d_learner: LearnerSpec
    z_learner: Optional[LearnerSpec] = None
    folds: int = 5
    seed: int = 42
    time_effects: bool = True
    fold_level: str = "unit"
    cluster: bool = True
    n_jobs: int = 1

    def with_learner(self, spec: LearnerSpec) -> DmlPipeline:
        """Same pipeline with ``spec`` for every nuisance function."""
        return replace(self, y_learner=spec, d_learner=spec,
                       z_learner=spec if self.z_learner is not None else None)

    def fold_assignment(self, ds: PanelDataset):
        if self.fold_level == "observation":
            return assign_observation_folds(ds, self.folds, self.seed)
        return assign_folds(ds.units, self.folds, self.seed)

    def residualize(self, ds: PanelDataset):
        return residualize(
            ds, self.y_learner, self.d_learner, self.fold_assignment(ds),
            z_spec=self.z_learner, time_effects=self.time_effects, n_jobs=self.n_jobs,
        )

    def estimate(self, ds: PanelDataset) -> EstimateResult:
        res = self.residualize(ds)
        if self.z_learner is not None:
            return estimate_iv_plr(res, cluster=self.cluster)
        return estimate_plr(res, cluster=self.cluster)

    __call__ = estimate
