"""Pre-estimation variable diagnostics: summary statistics, correlations,
variance inflation factors, PCA and the KMO sampling-adequacy measure."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import (
    NotPositiveSemiDefinite,
    PerfectCollinearity,
    SingularCorrelation,
    UnknownVariable,
)
from .inference import two_sided_p
from .panel import PanelDataset


def _columns(ds: PanelDataset, names):
    for name in names:
        if name not in ds.frame.columns:
            raise UnknownVariable(name)
    return ds.frame[list(names)].astype(float)


def describe(ds: PanelDataset, variables: Sequence[str]) -> pd.DataFrame:
    """n, mean, sample sd (n - 1), min and max per variable; missing cells skipped."""
    frame = _columns(ds, variables)
    rows = []
    for name in variables:
        x = frame[name].dropna().to_numpy()
        n = len(x)
        rows.append({
            "variable": name,
            "n": n,
            "mean": float(np.mean(x)) if n else math.nan,
            "sd": float(np.std(x, ddof=1)) if n > 1 else math.nan,
            "min": float(np.min(x)) if n else math.nan,
            "max": float(np.max(x)) if n else math.nan,
        })
    return pd.DataFrame(rows, columns=["variable", "n", "mean", "sd", "min", "max"])


def stars(p) -> str:
    if p is None or not math.isfinite(p):
        return ""
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


@dataclass
class CorrelationResult:
    r: pd.DataFrame  # NaN marks an undefined (zero-variance) pair
    p: pd.DataFrame
    n: pd.DataFrame

    def annotated(self) -> pd.DataFrame:
        """Matrix of ``r`` values with significance stars appended."""
        out = self.r.copy().astype(object)
        for i in self.r.index:
            for j in self.r.columns:
                r = self.r.loc[i, j]
                out.loc[i, j] = "NA" if math.isnan(r) else f"{r:.7g}{stars(self.p.loc[i, j])}"
        return out


def correlation_matrix(ds: PanelDataset, variables: Sequence[str]) -> CorrelationResult:
    """Pairwise-complete Pearson correlations with t-test p-values.

    Stars: * p < 0.1, ** p < 0.05, *** p < 0.01.
    """
    frame = _columns(ds, variables)
    k = len(variables)
    r = np.full((k, k), np.nan)
    p = np.full((k, k), np.nan)
    n = np.zeros((k, k), dtype=int)
    for i in range(k):
        for j in range(i, k):
            pair = frame.iloc[:, [i, j]].dropna().to_numpy()
            m = len(pair)
            n[i, j] = n[j, i] = m
            if m < 3:
                continue
            a = pair[:, 0] - pair[:, 0].mean()
            b = pair[:, 1] - pair[:, 1].mean()
            saa, sbb = a @ a, b @ b
            if saa <= 0 or sbb <= 0:
                continue
            rij = 1.0 if i == j else float(np.clip(a @ b / math.sqrt(saa * sbb), -1.0, 1.0))
            if abs(rij) >= 1.0:
                pij = 0.0
            else:
                pij = two_sided_p(rij * math.sqrt((m - 2) / (1 - rij * rij)), m - 2)
            r[i, j] = r[j, i] = rij
            p[i, j] = p[j, i] = pij
    idx = list(variables)
    return CorrelationResult(pd.DataFrame(r, idx, idx), pd.DataFrame(p, idx, idx),
                             pd.DataFrame(n, idx, idx))


def r_squared(y, X):
    """R^2 of OLS of ``y`` on ``X`` plus an intercept."""
    Z = np.column_stack([np.ones(len(y)), X])
    beta, *_ = np.linalg.lstsq(Z, y, rcond=None)
    e = y - Z @ beta
    yc = y - y.mean()
    return 1.0 - float(e @ e) / float(yc @ yc)


@dataclass
class VifTable:
    table: pd.DataFrame  # variable, vif, inv_vif; sorted by vif descending
    mean_vif: float


def vif(ds: PanelDataset, regressors: Sequence[str]) -> VifTable:
    """VIF_j = 1 / (1 - R^2_j) from regressing each column on the others."""
    if len(regressors) < 2:
        raise ValueError("VIF needs at least 2 regressors")
    X = _columns(ds, regressors).dropna().to_numpy()
    n, k = X.shape
    if n <= k:
        raise ValueError(f"{n} complete rows for {k} regressors")
    rows = []
    for j, name in enumerate(regressors):
        r2 = r_squared(X[:, j], np.delete(X, j, axis=1))
        if r2 >= 1 - 1e-12:
            raise PerfectCollinearity(name)
        v = 1.0 / (1.0 - r2)
        rows.append((name, v, 1.0 / v))
    table = pd.DataFrame(rows, columns=["variable", "vif", "inv_vif"])
    table = table.sort_values("vif", ascending=False, kind="mergesort").reset_index(drop=True)
    return VifTable(table, float(table["vif"].mean()))


def _partial_correlations(R):
    """Correlation of each pair given all other variables.

    Taken from the Schur complement of the pair rather than from the full
    inverse, so with two variables the result is exactly ``r``.
    """
    k = len(R)
    A = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            pair = [i, j]
            rest = [v for v in range(k) if v not in pair]
            C = R[np.ix_(pair, pair)]
            if rest:
                B = R[np.ix_(rest, pair)]
                C = C - B.T @ np.linalg.solve(R[np.ix_(rest, rest)], B)
            A[i, j] = A[j, i] = C[0, 1] / np.sqrt(C[0, 0] * C[1, 1])
    return A


def kmo(R) -> tuple:
    """Kaiser-Meyer-Olkin measure from a correlation matrix.

    Returns ``(overall, per_variable)``; either is None where the statistic
    is 0/0 (no off-diagonal correlation at all).
    """
    R = np.asarray(R, dtype=float)
    if np.linalg.cond(R) > 1e12:
        raise SingularCorrelation("correlation matrix is not invertible")
    A = _partial_correlations(R)
    off = ~np.eye(len(R), dtype=bool)
    r2 = np.where(off, R**2, 0.0)
    a2 = np.where(off, A**2, 0.0)
    num_j = r2.sum(axis=1)
    den_j = num_j + a2.sum(axis=1)
    per = [float(a / b) if b > 0 else None for a, b in zip(num_j, den_j)]
    overall = float(num_j.sum() / den_j.sum()) if den_j.sum() > 0 else None
    return overall, per


@dataclass
class PcaResult:
    variables: list
    eigenvalues: np.ndarray
    loadings: pd.DataFrame  # rows variables, columns components (orthonormal)
    retained: int
    scores: np.ndarray  # n x retained
    correlation: np.ndarray
    kmo_overall: Optional[float]
    kmo_per_variable: Optional[list]

    def scree(self) -> pd.DataFrame:
        ev = self.eigenvalues
        return pd.DataFrame({
            "component": np.arange(1, len(ev) + 1),
            "eigenvalue": ev,
            "proportion": ev / ev.sum(),
            "cumulative": np.cumsum(ev) / ev.sum(),
        })


def pca(ds: PanelDataset, variables: Sequence[str], mineigen: float = 1.0) -> PcaResult:
    """Principal components of the correlation matrix of ``variables``.

    Components with eigenvalue >= ``mineigen`` are retained (inclusive, with
    1e-10 slack for rounding). Each loading column is signed so its largest
    absolute entry is positive.
    """
    if len(variables) < 2:
        raise ValueError("PCA needs at least 2 variables")
    X = _columns(ds, variables).dropna().to_numpy()
    n, k = X.shape
    if n <= k:
        raise ValueError(f"{n} complete rows for {k} variables")
    sd = X.std(axis=0, ddof=1)
    if np.any(sd == 0):
        raise ValueError(f"constant variable {variables[int(np.argmin(sd))]!r}")
    Z = (X - X.mean(axis=0)) / sd
    R = Z.T @ Z / (n - 1)
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0)
    vals, vecs = np.linalg.eigh(R)
    if vals.min() < -1e-8:
        raise NotPositiveSemiDefinite(f"eigenvalue {vals.min():.3g}")
    order = np.argsort(vals, kind="mergesort")[::-1]
    vals, vecs = vals[order], vecs[:, order]
    for c in range(k):
        if vecs[np.argmax(np.abs(vecs[:, c])), c] < 0:
            vecs[:, c] *= -1
    retained = int(np.sum(vals >= mineigen - 1e-10))
    try:
        overall, per = kmo(R)
    except SingularCorrelation:
        overall, per = None, None
    loadings = pd.DataFrame(vecs, index=list(variables),
                            columns=[f"comp{c + 1}" for c in range(k)])
    return PcaResult(list(variables), vals, loadings, retained, Z @ vecs[:, :retained], R,
                     overall, per)
