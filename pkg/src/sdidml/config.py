"""Run configuration: a sectioned key = value file with explicit ``[a, b]``
lists, parsed against a fixed schema.

Example::

    [data]
    path = panel.csv
    unit_col = id
    time_col = year

    [roles]
    outcome = y
    treatment = d
    covariates = [x1, x2, x3]

    [dml]
    learner_y = forest(n_trees=200)

An explicit cohort map goes in its own section, one ``unit = period`` line
per unit (``never`` for never-treated units)::

    [cohorts.map]
    A = 2019
    B = never
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .errors import ConfigError
from .learners import parse_learner
from .panel import NEVER, RoleMap
from .simulator import DgpConfig

# value kinds: str, ostr (optional str), int, float, ofloat, bool, list (of str),
# intlist, ointlist, learner, olearner


def _split_list(text, key):
    text = text.strip()
    if not (text.startswith("[") and text.endswith("]")):
        raise ConfigError(key, "a bracketed list such as [a, b]")
    body = text[1:-1]
    items, depth, cur = [], 0, ""
    for ch in body:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            items.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        items.append(cur.strip())
    if any(not item for item in items):
        raise ConfigError(key, "a list without empty items")
    return items


def _bool(text, key):
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(key, "true or false")


def _int(text, key):
    try:
        return int(text.strip())
    except ValueError:
        raise ConfigError(key, "an integer") from None


def _float(text, key):
    try:
        return float(text.strip())
    except ValueError:
        raise ConfigError(key, "a real number") from None


def _learner(text, key):
    try:
        parse_learner(text)
    except (ValueError, TypeError):
        raise ConfigError(key, "a learner such as forest or forest(n_trees=200)") from None
    return text.strip()


def convert(kind, text, key):
    blank = text.strip() == ""
    if kind.startswith("o") and blank:
        return None
    base = kind[1:] if kind in ("ostr", "ofloat", "ointlist", "olearner") else kind
    if base == "str":
        if blank:
            raise ConfigError(key, "a non-empty string")
        return text.strip()
    if base == "int":
        return _int(text, key)
    if base == "float":
        return _float(text, key)
    if base == "bool":
        return _bool(text, key)
    if base == "list":
        return tuple(_split_list(text, key))
    if base == "intlist":
        return tuple(_int(v, key) for v in _split_list(text, key))
    if base == "learner":
        return _learner(text, key)
    raise AssertionError(kind)


def render(kind, value):
    if value is None:
        return ""
    if kind.endswith("list"):
        return "[" + ", ".join(str(v) for v in value) + "]"
    if kind == "bool":
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class DataSection:
    path: Optional[str] = None
    unit_col: str = "unit"
    time_col: str = "period"


@dataclass(frozen=True)
class RolesSection:
    outcome: Optional[str] = None
    treatment: Optional[str] = None
    covariates: tuple = ()
    instrument: Optional[str] = None
    moderator: Optional[str] = None
    mediator: Optional[str] = None
    cluster: Optional[str] = None
    group: Optional[str] = None

    def role_map(self) -> RoleMap:
        if self.outcome is None:
            raise ConfigError("roles.outcome", "an outcome column name")
        if self.treatment is None:
            raise ConfigError("roles.treatment", "a treatment column name")
        return RoleMap(self.outcome, self.treatment, self.covariates, self.instrument,
                       self.moderator, self.mediator, self.cluster, self.group)


@dataclass(frozen=True)
class CohortsSection:
    timing: Optional[str] = None  # column holding each unit's first treated period
    map: Optional[dict] = None  # unit -> first period, or NEVER


@dataclass(frozen=True)
class DmlSection:
    folds: int = 5
    learner_y: str = "forest"
    learner_d: str = "forest"
    learner_z: Optional[str] = None  # defaults to learner_d
    seed: int = 42
    time_effects: bool = True
    fold_level: str = "unit"

    def specs(self):
        y = parse_learner(self.learner_y, self.seed)
        d = parse_learner(self.learner_d, self.seed)
        z = parse_learner(self.learner_z or self.learner_d, self.seed)
        return y, d, z


@dataclass(frozen=True)
class RobustnessSection:
    event_floor: int = -4
    event_reference: int = -1
    placebo_reps: int = 500
    placebo_seed: int = 123
    placebo_scheme: str = "unit"
    counterfactual_reps: int = 500
    counterfactual_seed: int = 123
    sensitivity_folds: tuple = (5,)
    sensitivity_learners: tuple = ("forest", "lasso_cv")

    def learner_variants(self):
        return tuple(parse_learner(s) for s in self.sensitivity_learners)


@dataclass(frozen=True)
class MechanismsSection:
    mediation_method: str = "sobel"
    bootstrap_reps: int = 500
    bootstrap_seed: int = 123


@dataclass(frozen=True)
class OutputSection:
    directory: str = "report"


KINDS = {
    "data": (DataSection, {"path": "ostr", "unit_col": "str", "time_col": "str"}),
    "roles": (RolesSection, {
        "outcome": "ostr", "treatment": "ostr", "covariates": "list", "instrument": "ostr",
        "moderator": "ostr", "mediator": "ostr", "cluster": "ostr", "group": "ostr",
    }),
    "cohorts": (CohortsSection, {"timing": "ostr"}),
    "dml": (DmlSection, {
        "folds": "int", "learner_y": "learner", "learner_d": "learner", "learner_z": "olearner",
        "seed": "int", "time_effects": "bool", "fold_level": "str",
    }),
    "robustness": (RobustnessSection, {
        "event_floor": "int", "event_reference": "int", "placebo_reps": "int",
        "placebo_seed": "int", "placebo_scheme": "str", "counterfactual_reps": "int",
        "counterfactual_seed": "int", "sensitivity_folds": "intlist",
        "sensitivity_learners": "list",
    }),
    "mechanisms": (MechanismsSection, {
        "mediation_method": "str", "bootstrap_reps": "int", "bootstrap_seed": "int",
    }),
    "simulate": (DgpConfig, {
        "n_units": "int", "n_periods": "int", "p_covariates": "int", "theta0": "float",
        "cohort_periods": "ointlist", "never_share": "float", "nonlinearity": "str",
        "confounded_assignment": "bool", "effect_heterogeneity": "ofloat",
        "endogeneity": "ofloat", "instrument_strength": "ofloat", "noise_sd": "float",
        "fixed_effects": "bool", "mediator_a": "ofloat", "mediator_b": "float", "seed": "int",
    }),
    "output": (OutputSection, {"directory": "str"}),
}

CHOICES = {
    "dml.fold_level": ("unit", "observation"),
    "robustness.placebo_scheme": ("unit", "observation"),
    "mechanisms.mediation_method": ("sobel", "bootstrap"),
    "simulate.nonlinearity": ("linear", "nonlinear"),
}


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    roles: RolesSection = field(default_factory=RolesSection)
    cohorts: CohortsSection = field(default_factory=CohortsSection)
    dml: DmlSection = field(default_factory=DmlSection)
    robustness: RobustnessSection = field(default_factory=RobustnessSection)
    mechanisms: MechanismsSection = field(default_factory=MechanismsSection)
    simulate: Optional[DgpConfig] = None  # None: no [simulate] section given
    output: OutputSection = field(default_factory=OutputSection)

    def with_seed(self, seed: int) -> RunConfig:
        return replace(self, dml=replace(self.dml, seed=int(seed)))


def _parser():
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                   empty_lines_in_values=False)
    cp.optionxform = str
    return cp


def _parse_cohort_map(section):
    out = {}
    for unit, text in section.items():
        key = f"cohorts.map.{unit}"
        out[unit] = NEVER if text.strip().lower() == "never" else _int(text, key)
    return out


def parse_config(text: str) -> RunConfig:
    """Parse config text; unknown sections or keys raise ConfigError."""
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError("<file>", f"well-formed sections and key = value lines ({err})") from None
    parts = {}
    cohort_map = None
    for name in cp.sections():
        if name == "cohorts.map":
            cohort_map = _parse_cohort_map(cp[name])
            continue
        if name not in KINDS:
            raise ConfigError(name, f"a known section ({', '.join(list(KINDS) + ['cohorts.map'])})")
        cls, kinds = KINDS[name]
        values = {}
        for key, text_value in cp[name].items():
            full = f"{name}.{key}"
            if key not in kinds:
                raise ConfigError(full, f"a known key of [{name}] ({', '.join(kinds)})")
            values[key] = convert(kinds[key], text_value, full)
            if full in CHOICES and values[key] not in CHOICES[full]:
                raise ConfigError(full, " or ".join(CHOICES[full]))
        try:
            parts[name] = cls(**values)
        except ValueError as err:  # DgpConfig invariants
            raise ConfigError(name, str(err)) from None
    if cohort_map is not None:
        parts["cohorts"] = replace(parts.get("cohorts", CohortsSection()), map=cohort_map)
    cohorts = parts.get("cohorts")
    if cohorts is not None and cohorts.timing and cohorts.map:
        raise ConfigError("cohorts", "either a timing column or a [cohorts.map], not both")
    dml = parts.get("dml")
    if dml is not None and dml.folds < 2:
        raise ConfigError("dml.folds", "an integer >= 2")
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError("--config", f"a readable file ({err.strerror}: {path})") from None
    return parse_config(text)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text: every section and key in schema order, defaults filled."""
    cp = _parser()
    for name, (_, kinds) in KINDS.items():
        section = getattr(cfg, name)
        if section is None:
            continue
        cp[name] = {key: render(kind, getattr(section, key)) for key, kind in kinds.items()}
    if cfg.cohorts.map:
        cp["cohorts.map"] = {u: "never" if g is NEVER else str(g) for u, g in cfg.cohorts.map.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def config_dict(cfg: RunConfig) -> dict:
    """JSON-ready echo of the configuration."""
    out = {}
    for name in KINDS:
        section = getattr(cfg, name)
        if section is None:
            continue
        out[name] = {f.name: (list(v) if isinstance(v := getattr(section, f.name), tuple) else v)
                     for f in fields(section)}
    return out
