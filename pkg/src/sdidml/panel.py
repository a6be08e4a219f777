"""Long-format panel data: loading, role validation, treatment cohorts and
derived columns."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .errors import (
    DuplicateKey,
    EmptyData,
    EmptySubgroup,
    InconsistentGroup,
    InsufficientPanel,
    MissingColumn,
    NameCollision,
    NonBinaryTreatment,
    PanelWarning,
    ParseError,
    RoleOverlap,
    TimingOutOfRange,
    TreatmentReversal,
    UnknownUnit,
    ZeroVariance,
)

#: Cohort value of a unit that is never treated.
NEVER = None


@dataclass(frozen=True)
class RoleMap:
    outcome: str
    treatment: str
    covariates: tuple = ()
    instrument: Optional[str] = None
    moderator: Optional[str] = None
    mediator: Optional[str] = None
    cluster: Optional[str] = None  # None clusters on the unit identifier
    group: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        seen = {}
        for role, col in self.items():
            if col in seen:
                raise RoleOverlap(f"column {col!r} assigned to both {seen[col]} and {role}")
            seen[col] = role

    def items(self):
        """(role, column) pairs for every assigned role."""
        out = [("outcome", self.outcome), ("treatment", self.treatment)]
        out += [("covariates", c) for c in self.covariates]
        for role in ("instrument", "moderator", "mediator", "cluster", "group"):
            col = getattr(self, role)
            if col is not None:
                out.append((role, col))
        return out

    def columns(self):
        return [col for _, col in self.items()]


@dataclass(frozen=True)
class PanelDataset:
    """Unit-by-period observations held in a pandas frame sorted by (unit, period).

    The frame is treated as immutable; every transformation returns a new
    dataset.
    """

    frame: pd.DataFrame
    unit_col: str = "unit"
    time_col: str = "period"
    roles: Optional[RoleMap] = None

    @property
    def column_names(self):
        return [c for c in self.frame.columns if c not in (self.unit_col, self.time_col)]

    @property
    def n_rows(self):
        return len(self.frame)

    @property
    def unit_ids(self) -> np.ndarray:
        return self.frame[self.unit_col].to_numpy()

    @property
    def periods(self) -> np.ndarray:
        return self.frame[self.time_col].to_numpy()

    @property
    def units(self):
        return sorted(pd.unique(self.frame[self.unit_col]))

    @property
    def period_values(self):
        return sorted(int(p) for p in pd.unique(self.frame[self.time_col]))

    def column(self, name) -> np.ndarray:
        if name not in self.frame.columns:
            raise MissingColumn(name)
        return self.frame[name].to_numpy(dtype=float)

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        for n in names:
            if n not in self.frame.columns:
                raise MissingColumn(n)
        return self.frame[list(names)].to_numpy(dtype=float)

    def cluster_ids(self) -> np.ndarray:
        if self.roles is not None and self.roles.cluster is not None:
            return self.frame[self.roles.cluster].to_numpy()
        return self.unit_ids

    def with_columns(self, columns: Mapping[str, Iterable]) -> PanelDataset:
        frame = self.frame.copy()
        for name, values in columns.items():
            frame[name] = np.asarray(values)
        return replace(self, frame=frame)

    def with_roles(self, roles: Optional[RoleMap]) -> PanelDataset:
        return replace(self, roles=roles)

    def take_rows(self, mask) -> PanelDataset:
        return replace(self, frame=self.frame.loc[np.asarray(mask)].reset_index(drop=True))

    @classmethod
    def from_frame(cls, frame, unit_col="unit", time_col="period", roles=None):
        for col in (unit_col, time_col):
            if col not in frame.columns:
                raise MissingColumn(col)
        frame = frame.copy()
        frame[unit_col] = frame[unit_col].astype(str)
        frame[time_col] = frame[time_col].astype(np.int64)
        if frame.duplicated([unit_col, time_col]).any():
            dup = frame.loc[frame.duplicated([unit_col, time_col]), [unit_col, time_col]].iloc[0]
            raise DuplicateKey(f"(unit, period) = ({dup.iloc[0]}, {dup.iloc[1]}) repeated")
        frame = frame.sort_values([unit_col, time_col], kind="mergesort").reset_index(drop=True)
        return cls(frame, unit_col, time_col, roles)


@dataclass
class ValidationReport:
    n_rows: int
    n_units: int
    n_periods: int
    balanced: bool
    dropped_rows: int = 0
    drop_reasons: dict = field(default_factory=dict)
    zero_variance_columns: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "n_rows": self.n_rows,
            "n_units": self.n_units,
            "n_periods": self.n_periods,
            "balanced": self.balanced,
            "dropped_rows": self.dropped_rows,
            "drop_reasons": dict(self.drop_reasons),
            "zero_variance_columns": list(self.zero_variance_columns),
            "warnings": list(self.warnings),
        }


def _parse_period(text, row, column):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(row, column, text) from None
    if not math.isfinite(value) or value != int(value):
        raise ParseError(row, column, text)
    return int(value)


def load_panel_csv(path, unit_col: str, time_col: str) -> PanelDataset:
    """Read a long-format panel CSV.

    Every column other than the unit and time keys is parsed as a real
    number; empty cells become missing values. Rows are numbered from 1
    (the first data row) in parse errors.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyData(f"{path}: no header row") from None
        rows = [r for r in reader if r]
    for col in (unit_col, time_col):
        if col not in header:
            raise MissingColumn(col)
    if not rows:
        raise EmptyData(f"{path}: no data rows")

    data = {name: [] for name in header}
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ParseError(i, "*", ",".join(row))
        for name, cell in zip(header, row):
            cell = cell.strip()
            if name == unit_col:
                if cell == "":
                    raise ParseError(i, name, cell)
                data[name].append(cell)
            elif name == time_col:
                data[name].append(_parse_period(cell, i, name))
            elif cell == "":
                data[name].append(np.nan)
            else:
                try:
                    data[name].append(float(cell))
                except ValueError:
                    raise ParseError(i, name, cell) from None
    frame = pd.DataFrame(data, columns=header)
    return PanelDataset.from_frame(frame, unit_col, time_col)


def format_cell(value):
    """CSV text for a cell: shortest round-trip repr for floats, empty for missing."""
    if isinstance(value, str):
        return value
    if value is None or (isinstance(value, float) and math.isnan(value)) or value is pd.NA:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def panel_csv_text(ds: PanelDataset) -> str:
    """The panel as CSV text with full round-trip float precision."""
    cols = [ds.unit_col, ds.time_col] + ds.column_names
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in ds.frame[cols].itertuples(index=False):
        writer.writerow([format_cell(v) for v in row])
    return buf.getvalue()


def write_panel_csv(ds: PanelDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(panel_csv_text(ds))


def _is_balanced(ds):
    return ds.n_rows == len(ds.units) * len(ds.period_values)


def assign_roles(ds: PanelDataset, roles: RoleMap):
    """Attach ``roles`` to ``ds`` and validate the role columns.

    Returns the cleaned dataset (rows with missing role values removed) and
    a :class:`ValidationReport`.
    """
    for col in roles.columns():
        if col not in ds.frame.columns:
            raise MissingColumn(col)

    frame = ds.frame
    keep = np.ones(len(frame), dtype=bool)
    reasons = {}
    for role, col in roles.items():
        missing = frame[col].isna().to_numpy() & keep
        if missing.any():
            label = "missing " + (role if role != "covariates" else col)
            reasons[label] = reasons.get(label, 0) + int(missing.sum())
            keep &= ~missing
    clean = ds.take_rows(keep) if not keep.all() else ds
    clean = clean.with_roles(roles)

    d = clean.frame[roles.treatment].to_numpy(dtype=float)
    bad = ~np.isin(d, (0.0, 1.0))
    if bad.any():
        raise NonBinaryTreatment(f"treatment {roles.treatment!r} takes value {d[bad][0]!r}")
    # rows are sorted by (unit, period): a drop within a unit is a reversal
    units = clean.unit_ids
    same_unit = units[1:] == units[:-1]
    reversed_ = same_unit & (np.diff(d) < 0)
    if reversed_.any():
        raise TreatmentReversal(f"unit {units[1:][reversed_][0]!r} leaves treatment")

    n_units = len(clean.units)
    n_periods = len(clean.period_values)
    if n_units < 2 or n_periods < 2:
        raise InsufficientPanel(f"need at least 2 units and 2 periods, got {n_units} and {n_periods}")

    report = ValidationReport(
        n_rows=clean.n_rows,
        n_units=n_units,
        n_periods=n_periods,
        balanced=_is_balanced(clean),
        dropped_rows=int((~keep).sum()),
        drop_reasons=reasons,
    )
    for col in roles.covariates:
        x = clean.column(col)
        if np.all(x == x[0]):
            report.zero_variance_columns.append(col)
    if report.zero_variance_columns:
        report.warnings.append("zero-variance covariates: " + ", ".join(report.zero_variance_columns))
    if not report.balanced:
        report.warnings.append(
            f"unbalanced panel: {report.n_rows} rows for {n_units} units x {n_periods} periods"
        )
    for msg in report.warnings:
        warnings.warn(msg, PanelWarning, stacklevel=2)
    return clean, report


@dataclass(frozen=True)
class CohortMap:
    """First treatment period per unit; :data:`NEVER` for never-treated units."""

    entries: Mapping[str, Optional[int]]

    def __getitem__(self, unit):
        return self.entries[unit]

    @property
    def treated_units(self):
        return sorted(u for u, g in self.entries.items() if g is not NEVER)

    @property
    def never_treated_units(self):
        return sorted(u for u, g in self.entries.items() if g is NEVER)

    def first_period_array(self, ds: PanelDataset) -> np.ndarray:
        """Per-row G as floats, NaN for never-treated units."""
        lookup = {u: (np.nan if g is NEVER else float(g)) for u, g in self.entries.items()}
        return np.array([lookup[u] for u in ds.unit_ids], dtype=float)

    def treatment_indicator(self, ds: PanelDataset) -> np.ndarray:
        g = self.first_period_array(ds)
        with np.errstate(invalid="ignore"):
            return np.where(np.isnan(g), 0.0, (ds.periods >= g).astype(float))


def cohorts_from_treatment(ds: PanelDataset, column: str) -> CohortMap:
    """Recover G_i as the first period in which ``column`` equals 1."""
    d = ds.column(column)
    frame = pd.DataFrame({"u": ds.unit_ids, "t": ds.periods, "d": d})
    entries = {}
    for unit, sub in frame.groupby("u", sort=True):
        treated = sub.loc[sub["d"] == 1, "t"]
        entries[unit] = int(treated.min()) if len(treated) else NEVER
    return CohortMap(entries)


def derive_cohorts(ds: PanelDataset, timing: Union[str, Mapping], treatment: str = "D"):
    """Build a :class:`CohortMap` and (re)generate the absorbing treatment column.

    ``timing`` is either the name of a column holding each unit's first
    treatment period (missing = never treated) or a mapping unit -> period.
    Units absent from a mapping are never treated. Returns
    ``(dataset, cohorts)``.
    """
    units = ds.units
    lo, hi = min(ds.period_values), max(ds.period_values)
    if isinstance(timing, str):
        values = ds.column(timing)
        frame = pd.DataFrame({"u": ds.unit_ids, "g": values})
        entries = {}
        for unit, sub in frame.groupby("u", sort=True):
            g = sub["g"].dropna().unique()
            if len(g) > 1:
                raise InconsistentGroup(f"unit {unit!r} has several timing values {sorted(g)}")
            if len(g) and sub["g"].isna().any():
                raise InconsistentGroup(f"unit {unit!r} has timing only in some periods")
            entries[unit] = int(g[0]) if len(g) else NEVER
    else:
        known = set(units)
        entries = {u: NEVER for u in units}
        for unit, g in timing.items():
            unit = str(unit)
            if unit not in known:
                raise UnknownUnit(unit)
            entries[unit] = NEVER if g is None else int(g)
    for unit, g in entries.items():
        if g is not NEVER and not lo <= g <= hi:
            raise TimingOutOfRange(f"unit {unit!r}: period {g} outside [{lo}, {hi}]")

    cohorts = CohortMap(entries)
    d = cohorts.treatment_indicator(ds)
    if treatment in ds.frame.columns:
        old = ds.column(treatment)
        mismatch = ~np.isnan(old) & (old != d)
        if mismatch.any():
            warnings.warn(
                f"existing {treatment!r} disagrees with cohort timing in {int(mismatch.sum())} rows;"
                " regenerated",
                PanelWarning,
                stacklevel=2,
            )
    return ds.with_columns({treatment: d}), cohorts


def standardize(col):
    return ("standardize", col)


def square(col):
    return ("square", col)


def interact(a, b):
    return ("interact", a, b)


def derive_features(ds: PanelDataset, specs) -> PanelDataset:
    """Append derived columns.

    ``specs`` holds tuples built by :func:`standardize`, :func:`square` and
    :func:`interact`; they produce ``std_<c>``, ``<c>2`` and ``<a>_x_<b>``.
    Standardization uses the sample standard deviation (n - 1).
    """
    new = {}
    for spec in specs:
        kind, *cols = spec
        for c in cols:
            if c not in ds.frame.columns:
                raise MissingColumn(c)
        if kind == "standardize":
            (c,) = cols
            x = ds.column(c)
            sd = np.nanstd(x, ddof=1)
            if not sd > 0:
                raise ZeroVariance(c)
            name, values = f"std_{c}", (x - np.nanmean(x)) / sd
        elif kind == "square":
            (c,) = cols
            name, values = f"{c}2", ds.column(c) ** 2
        elif kind == "interact":
            a, b = cols
            name, values = f"{a}_x_{b}", ds.column(a) * ds.column(b)
        else:
            raise ValueError(f"unknown feature kind {kind!r}")
        if name in ds.frame.columns or name in new:
            raise NameCollision(name)
        new[name] = values
    return ds.with_columns(new)


def relative_time(ds: PanelDataset, cohorts: CohortMap, floor_bin: int = -4) -> pd.Series:
    """Event time t - G_i with leads at or below ``floor_bin`` pooled into it.

    Never-treated units get a missing value (``pd.NA``).
    """
    if floor_bin >= 0:
        raise ValueError("floor_bin must be negative")
    g = cohorts.first_period_array(ds)
    dist = ds.periods - g
    dist = np.where(np.isnan(dist), np.nan, np.maximum(dist, floor_bin))
    return pd.Series(dist, name="distance").astype("Int64")


def unit_group_values(ds: PanelDataset, column: str) -> dict:
    """Time-invariant value of ``column`` per unit."""
    frame = pd.DataFrame({"u": ds.unit_ids, "v": ds.frame[column].to_numpy()})
    counts = frame.groupby("u")["v"].nunique(dropna=False)
    if (counts > 1).any():
        unit = counts.index[counts > 1][0]
        raise InconsistentGroup(f"unit {unit!r} changes {column!r} over time")
    return frame.groupby("u", sort=True)["v"].first().to_dict()


def filter_subgroup(ds: PanelDataset, column: str, keep_values) -> PanelDataset:
    """Keep every row of each unit whose (time-invariant) group value is kept."""
    if column not in ds.frame.columns:
        raise MissingColumn(column)
    keep_values = set(keep_values)
    if not keep_values:
        raise ValueError("keep_values must be non-empty")
    groups = unit_group_values(ds, column)
    kept = {u for u, v in groups.items() if v in keep_values}
    if not kept:
        raise EmptySubgroup(f"no unit has {column!r} in {sorted(keep_values)}")
    return ds.take_rows(np.isin(ds.unit_ids, list(kept)))
