"""Command-line entry point: ``sdidml <step> --config run.ini``.

``all`` runs every step in workflow order (data, diagnostics, benchmark,
estimation, robustness, moderation, mechanisms) and stops at the first hard
error. Steps whose roles are not configured are skipped under ``all`` and
rejected with a ConfigError when requested on their own.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Optional

import numpy as np
import pandas as pd

from . import __version__
from .config import RunConfig, config_dict, load_config
from .diagnostics import correlation_matrix, describe, pca, vif
from .errors import ConfigError, SdidmlError, StepFailure
from .estimators import estimate_iv_plr, estimate_plr, estimate_twfe, round7
from .inference import fmt7
from .mechanisms import mediation, moderation, subgroup_compare
from .panel import (
    assign_roles,
    cohorts_from_treatment,
    derive_cohorts,
    load_panel_csv,
    panel_csv_text,
)
from .pipeline import DmlPipeline
from .report import ReportBundle, StepStatus, emit_report
from .robustness import (
    counterfactual_timing,
    event_study,
    placebo_permutation,
    sensitivity_scan,
)
from .simulator import DgpConfig, generate_panel

STEPS = (
    "simulate", "validate", "describe", "corr", "vif", "pca", "twfe", "dml", "iv-dml",
    "event-study", "placebo", "counterfactual", "sensitivity", "moderate", "mediate", "subgroup",
)
FLAGS = ("observation-folds", "observation-placebo")
OUT_ENV = "SDIDML_OUT"


class SkipStep(Exception):
    pass


@dataclass
class RunContext:
    cfg: RunConfig
    threads: int = 1
    flags: frozenset = frozenset()
    ds: object = None
    validation: object = None
    cohorts: object = None
    sim: Optional[tuple] = None  # (DgpConfig, dataset, truth) when data are simulated
    cache: dict = field(default_factory=dict)

    @property
    def simulated(self):
        return self.cfg.data.path is None

    @property
    def roles(self):
        return self.ds.roles

    def pipeline(self) -> DmlPipeline:
        dml = self.cfg.dml
        y, d, z = dml.specs()
        fold_level = "observation" if "observation-folds" in self.flags else dml.fold_level
        return DmlPipeline(y, d, z if self.roles.instrument else None, folds=dml.folds,
                           seed=dml.seed, time_effects=dml.time_effects, fold_level=fold_level,
                           n_jobs=self.threads)

    def plr_pipeline(self) -> DmlPipeline:
        return replace(self.pipeline(), z_learner=None)


def _dgp(cfg: RunConfig) -> DgpConfig:
    return cfg.simulate if cfg.simulate is not None else DgpConfig()


def prepare(ctx: RunContext):
    """Load or simulate the panel, build cohorts and apply the role checks."""
    cfg = ctx.cfg
    if ctx.simulated:
        dgp = _dgp(cfg)
        raw, truth = generate_panel(dgp)
        ctx.sim = (dgp, raw, truth)
        roles = cfg.roles.role_map() if cfg.roles.outcome is not None else raw.roles
    else:
        raw = load_panel_csv(cfg.data.path, cfg.data.unit_col, cfg.data.time_col)
        roles = cfg.roles.role_map()
    timing = cfg.cohorts.timing or cfg.cohorts.map
    if timing:
        raw, _ = derive_cohorts(raw, timing, treatment=roles.treatment)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ds, report = assign_roles(raw, roles)
    ctx.ds, ctx.validation = ds, report
    ctx.cohorts = cohorts_from_treatment(ds, roles.treatment)
    ctx.cache["prepare_warnings"] = [str(w.message) for w in caught]


def _need(ctx, role, key=None):
    if getattr(ctx.roles, role) is None:
        raise ConfigError(key or f"roles.{role}", f"a {role} column name")


def _need_covariates(ctx, at_least=1):
    if len(ctx.roles.covariates) < at_least:
        raise ConfigError("roles.covariates", f"a list of at least {at_least} covariate(s)")


def _variables(ctx):
    r = ctx.roles
    extra = [c for c in (r.instrument, r.moderator, r.mediator) if c]
    return [r.outcome, r.treatment] + list(r.covariates) + extra


def _headline(label, res):
    return f"{label}: {res.summary_line()}"


def _coef_line(row):
    """Inference line for a TWFE coefficient row (Student t)."""
    return (f"θ={fmt7(row['coef'])}, SE={fmt7(row['se'])}, t={fmt7(row['t'])}, "
            f"p={fmt7(row['p'])}, 95% CI [{fmt7(row['ci_low'])}, {fmt7(row['ci_high'])}]")


def _r7(frame):
    out = frame.copy()
    for c in out.columns:
        if pd.api.types.is_float_dtype(out[c]):
            out[c] = [round7(v) for v in out[c]]
    return out


# ---------------------------------------------------------------- steps


def step_simulate(ctx, st, bundle):
    if not ctx.simulated:
        raise SkipStep("data.path is set; nothing to simulate")
    dgp, raw, truth = ctx.sim
    bundle.add(st, "simulated_panel.csv", panel_csv_text(raw).encode())
    bundle.add_json(st, "simulated_truth.json", {
        "config": dgp.to_dict(),
        "theta0": truth.theta0,
        "cohorts": {u: g for u, g in sorted(truth.cohorts.entries.items())},
        "propensity": truth.propensity,
    })
    st.headlines.append(f"{raw.n_rows} rows, {len(raw.units)} units, theta0={fmt7(truth.theta0)}")


def step_validate(ctx, st, bundle):
    rep = ctx.validation.to_dict()
    treated = ctx.cohorts.treated_units
    counts = {}
    for u in treated:
        counts[str(ctx.cohorts[u])] = counts.get(str(ctx.cohorts[u]), 0) + 1
    rep["cohorts"] = {
        "treated_units": len(treated),
        "never_treated_units": len(ctx.cohorts.never_treated_units),
        "units_by_first_period": dict(sorted(counts.items())),
    }
    rep["roles"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in ctx.roles.items()}
    bundle.add_json(st, "validation.json", rep)
    st.headlines.append(f"{rep['n_rows']} rows kept, {rep['dropped_rows']} dropped, "
                        f"balanced={rep['balanced']}")


def step_describe(ctx, st, bundle):
    bundle.add_csv(st, "describe.csv", _r7(describe(ctx.ds, _variables(ctx))))


def step_corr(ctx, st, bundle):
    res = correlation_matrix(ctx.ds, _variables(ctx))
    r = res.annotated().reset_index(names="variable")
    bundle.add_csv(st, "corr.csv", r)
    bundle.add_csv(st, "corr_p.csv", _r7(res.p).reset_index(names="variable"))


def step_vif(ctx, st, bundle):
    _need_covariates(ctx, 2)
    res = vif(ctx.ds, list(ctx.roles.covariates))
    bundle.add_csv(st, "vif.csv", _r7(res.table))
    st.headlines.append(f"mean VIF={fmt7(res.mean_vif)}")


def step_pca(ctx, st, bundle):
    _need_covariates(ctx, 2)
    res = pca(ctx.ds, list(ctx.roles.covariates))
    bundle.add_csv(st, "pca_eigenvalues.csv", _r7(res.scree()))
    bundle.add_csv(st, "pca_loadings.csv", _r7(res.loadings).reset_index(names="variable"))
    scores = pd.DataFrame(res.scores, columns=[f"comp{c + 1}" for c in range(res.retained)])
    scores.insert(0, "period", ctx.ds.periods)
    scores.insert(0, "unit", ctx.ds.unit_ids)
    bundle.add_csv(st, "pca_scores.csv", _r7(scores))
    bundle.add_json(st, "kmo.json", {
        "overall": round7(res.kmo_overall),
        "per_variable": dict(zip(res.variables,
                                 [round7(v) for v in (res.kmo_per_variable or [None] * len(res.variables))])),
    })
    st.headlines.append(f"{res.retained} component(s) retained, KMO={fmt7(res.kmo_overall)}")


def step_twfe(ctx, st, bundle):
    r = ctx.roles
    res = estimate_twfe(ctx.ds, r.outcome, [r.treatment] + list(r.covariates),
                        cluster=r.cluster or True)
    bundle.add_json(st, "twfe.json", res.to_dict())
    st.headlines.append(f"TWFE {r.treatment}: " + _coef_line(res.coefficients.loc[r.treatment]))


def _dml_metadata(ctx, pipe):
    return {
        "folds": pipe.folds,
        "seed": pipe.seed,
        "fold_level": pipe.fold_level,
        "time_effects": pipe.time_effects,
        "learner_y": pipe.y_learner.descriptor,
        "learner_d": pipe.d_learner.descriptor,
        "learner_z": pipe.z_learner.descriptor if pipe.z_learner else None,
    }


def step_dml(ctx, st, bundle):
    pipe = ctx.plr_pipeline()
    res = pipe.residualize(ctx.ds)
    est = estimate_plr(res, cluster=True)
    ctx.cache["dml"] = est
    bundle.add_json(st, "estimates.json", {"estimate": est.to_dict(), "metadata": _dml_metadata(ctx, pipe)})
    bundle.add_csv(st, "residuals.csv", res.to_frame())
    st.headlines.append(_headline("S-DIDML", est))


def step_iv_dml(ctx, st, bundle):
    _need(ctx, "instrument")
    pipe = ctx.pipeline()
    est = estimate_iv_plr(pipe.residualize(ctx.ds), cluster=True)
    bundle.add_json(st, "iv_estimates.json", {"estimate": est.to_dict(),
                                              "metadata": _dml_metadata(ctx, pipe)})
    st.headlines.append(_headline("IV-DML", est))


def step_event_study(ctx, st, bundle):
    rb = ctx.cfg.robustness
    res = event_study(ctx.ds, ctx.cohorts, list(ctx.roles.covariates), floor_bin=rb.event_floor,
                      reference=rb.event_reference, cluster=ctx.roles.cluster or True)
    bundle.add_csv(st, "event_study.csv", _r7(res.table))
    st.headlines.append(f"{len(res.table)} relative-time coefficients, reference {res.reference}")


def step_placebo(ctx, st, bundle):
    rb = ctx.cfg.robustness
    scheme = "observation" if "observation-placebo" in ctx.flags else rb.placebo_scheme
    res = placebo_permutation(ctx.ds, ctx.plr_pipeline(), reps=rb.placebo_reps,
                              seed=rb.placebo_seed, cohorts=ctx.cohorts, scheme=scheme,
                              n_jobs=ctx.threads)
    bundle.add_csv(st, "placebo.csv", pd.DataFrame({"rep": np.arange(res.reps), "theta": res.thetas}))
    grid, dens = res.density()
    bundle.add_csv(st, "placebo_density.csv", pd.DataFrame({"grid": grid, "density": dens}))
    bundle.add_json(st, "placebo.json", res.to_dict())
    st.headlines.append(f"observed θ={fmt7(res.observed_theta)}, permutation p={fmt7(res.p_value)} "
                        f"({res.reps} reps, {res.failures} failed)")


def step_counterfactual(ctx, st, bundle):
    rb = ctx.cfg.robustness
    res = counterfactual_timing(ctx.ds, ctx.plr_pipeline(), reps=rb.counterfactual_reps,
                                seed=rb.counterfactual_seed, cohorts=ctx.cohorts, n_jobs=ctx.threads)
    bundle.add_csv(st, "counterfactual.csv", pd.DataFrame({"rep": np.arange(res.reps), "theta": res.thetas}))
    sd = res.sd if res.sd > 0 else math.nan
    normal = np.exp(-0.5 * ((res.grid - res.mean) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
    bundle.add_csv(st, "counterfactual_density.csv",
                   pd.DataFrame({"grid": res.grid, "density": res.density, "normal": normal}))
    bundle.add_json(st, "counterfactual.json", res.to_dict())
    st.headlines.append(f"observed θ={fmt7(res.observed_theta)} at percentile {fmt7(res.percentile)}, "
                        f"two-sided tail share {fmt7(res.tail_share)}")


def step_sensitivity(ctx, st, bundle):
    rb = ctx.cfg.robustness
    table = sensitivity_scan(ctx.ds, ctx.plr_pipeline(), rb.sensitivity_folds, rb.learner_variants())
    bundle.add_csv(st, "sensitivity.csv", _r7(table.to_frame()))
    for row in table.rows:
        st.headlines.append(_headline(row.variant, row.result) if row.result
                            else f"{row.variant}: failed ({row.error})")


def step_moderate(ctx, st, bundle):
    _need(ctx, "moderator")
    res = moderation(ctx.ds, cluster=ctx.roles.cluster or True)
    bundle.add_json(st, "moderation.json", _round_tree(res.to_dict()))
    st.headlines.append(f"{res.interaction_name}: "
                        + _coef_line(res.twfe.coefficients.loc[res.interaction_name]))


def step_mediate(ctx, st, bundle):
    _need(ctx, "mediator")
    mc = ctx.cfg.mechanisms
    res = mediation(ctx.ds, cluster=True, method=mc.mediation_method, reps=mc.bootstrap_reps,
                    seed=mc.bootstrap_seed)
    bundle.add_json(st, "mediation.json", _round_tree(res.to_dict()))
    st.headlines.append(f"indirect={fmt7(res.indirect)}, SE={fmt7(res.indirect_se)}, "
                        f"z={fmt7(res.indirect_z)}, p={fmt7(res.indirect_p)}")


def step_subgroup(ctx, st, bundle):
    _need(ctx, "group")
    res = subgroup_compare(ctx.ds, ctx.roles.group, ctx.plr_pipeline())
    bundle.add_json(st, "subgroups.json", res.to_dict())
    for label, est in res.groups.items():
        st.headlines.append(_headline(f"{ctx.roles.group}={label}", est))


def _round_tree(obj):
    if isinstance(obj, dict):
        return {k: _round_tree(v) for k, v in obj.items()}
    if isinstance(obj, float):
        return round7(obj)
    return obj


STEP_FUNCS = {
    "simulate": step_simulate, "validate": step_validate, "describe": step_describe,
    "corr": step_corr, "vif": step_vif, "pca": step_pca, "twfe": step_twfe, "dml": step_dml,
    "iv-dml": step_iv_dml, "event-study": step_event_study, "placebo": step_placebo,
    "counterfactual": step_counterfactual, "sensitivity": step_sensitivity,
    "moderate": step_moderate, "mediate": step_mediate, "subgroup": step_subgroup,
}


def run_step(ctx, name, bundle, optional):
    """Run one step; soft warnings are noted, hard errors raise StepFailure."""
    st = StepStatus(name, "ok")
    bundle.steps.append(st)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            STEP_FUNCS[name](ctx, st, bundle)
    except SkipStep as why:
        st.status, st.message = "skipped", str(why)
        return st
    except ConfigError as err:
        if optional:
            st.status, st.message = "skipped", f"not configured: {err.key}"
            return st
        st.status, st.message = "failed", str(err)
        raise
    except SdidmlError as err:
        st.status, st.message = "failed", f"{type(err).__name__}: {err}"
        raise StepFailure(name, err) from err
    notes = sorted({str(w.message) for w in caught})
    if notes:
        st.message = "warnings: " + "; ".join(notes)
    return st


def run(cfg: RunConfig, command: str, out_dir, threads: int = 1, flags=(), timestamp=None):
    """Execute ``command`` and write its report bundle; returns the bundle.

    A failing step is recorded, the bundle is still written, and the error
    is re-raised afterwards.
    """
    ctx = RunContext(cfg, threads=max(1, int(threads)), flags=frozenset(flags))
    bundle = ReportBundle(metadata={
        "tool": "sdidml",
        "version": __version__,
        "command": command,
        "timestamp": timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "threads": ctx.threads,
        "flags": sorted(ctx.flags),
        "config": config_dict(cfg),
    })
    error = None
    try:
        try:
            prepare(ctx)
        except SdidmlError as err:
            if isinstance(err, ConfigError):
                raise
            bundle.steps.append(StepStatus("validate", "failed", f"{type(err).__name__}: {err}"))
            raise StepFailure("validate", err) from err
        names = STEPS if command == "all" else (command,)
        for name in names:
            run_step(ctx, name, bundle, optional=command == "all")
    except SdidmlError as err:
        error = err
    emit_report(bundle, out_dir)
    if error is not None:
        raise error
    return bundle


def build_parser():
    p = argparse.ArgumentParser(prog="sdidml", description="Staggered DiD with double machine learning.")
    p.add_argument("command", choices=STEPS + ("all",), help="workflow step to run")
    p.add_argument("--config", help="run configuration file (optional for simulate)")
    p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and output.directory)")
    p.add_argument("--seed", type=int, help="overrides dml.seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    p.add_argument("--flag", action="append", default=[], choices=FLAGS,
                   help="replication mode; may be repeated")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            cfg = load_config(args.config)
        elif args.command == "simulate":
            cfg = RunConfig()
        else:
            raise ConfigError("--config", "a configuration file path")
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = args.out or os.environ.get(OUT_ENV) or cfg.output.directory
        bundle = run(cfg, args.command, out, threads=args.threads, flags=args.flag)
    except ConfigError as err:
        print(f"sdidml: config error: {err}", file=sys.stderr)
        return 2
    except StepFailure as err:
        print(f"sdidml: {err}", file=sys.stderr)
        return 1
    except SdidmlError as err:
        print(f"sdidml: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    for st in bundle.steps:
        print(f"{st.step}: {st.status}" + (f" ({st.message})" if st.message else ""))
        for line in st.headlines:
            print(f"  {line}")
    print(f"report written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
