"""Mean, OLS, ridge and lasso regression with an unpenalized intercept.

Penalized fits work on centered targets and standardized features (unit
population variance) and map coefficients back to the original scale.
"""

import warnings

import numpy as np
from numba import njit

from ..errors import InsufficientData, LassoPathWarning, SingularDesign

CD_TOL = 1e-7
CD_MAX_SWEEPS = 100_000


def fit_mean(X, y):
    return float(np.mean(y)), np.zeros(X.shape[1])


def first_dependent_column(X, tol=1e-10):
    """Index of the first column of ``[1, X]`` lying in the span of the
    columns before it, or None when the design has full column rank."""
    Z = np.column_stack([np.ones(len(X)), X])
    _, r = np.linalg.qr(Z)
    diag = np.abs(np.diag(r))
    scale = np.linalg.norm(Z, axis=0)
    scale[scale == 0] = 1.0
    bad = np.flatnonzero(diag <= tol * scale)
    if bad.size == 0 and Z.shape[0] >= Z.shape[1]:
        return None
    if bad.size == 0:
        return Z.shape[0]
    return int(bad[0])


def fit_ols(X, y, names=None):
    dep = first_dependent_column(X)
    if dep is not None:
        if dep == 0:
            column = "intercept"
        else:
            j = dep - 1
            column = names[j] if names is not None and j < len(names) else j
        raise SingularDesign(column)
    Z = np.column_stack([np.ones(len(X)), X])
    beta, *_ = np.linalg.lstsq(Z, y, rcond=None)
    return float(beta[0]), beta[1:]


def standardize_design(X):
    """Center and scale columns to unit population variance.

    Constant columns keep scale 1 and become all-zero after centering, so
    their coefficient is pinned at zero.
    """
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 1e-12 * (np.abs(mean) + 1.0), sd, 0.0)
    scale = np.where(sd > 0, sd, 1.0)
    Xs = (X - mean) / scale
    Xs[:, sd == 0] = 0.0
    return Xs, mean, scale


def _to_original(beta_std, x_mean, x_scale, y_mean):
    coef = beta_std / x_scale
    return float(y_mean - x_mean @ coef), coef


def fit_ridge(X, y, lam):
    """Minimize ||yc - Xs b||^2 / (2n) + lam/2 * ||b||^2 on the standardized scale."""
    n, p = X.shape
    Xs, x_mean, x_scale = standardize_design(X)
    y_mean = y.mean()
    yc = y - y_mean
    if lam == 0:
        beta, *_ = np.linalg.lstsq(Xs, yc, rcond=None)
    else:
        beta = np.linalg.solve(Xs.T @ Xs / n + lam * np.eye(p), Xs.T @ yc / n)
    return _to_original(beta, x_mean, x_scale, y_mean)


def ridge_objective(intercept, coef, X, y, lam):
    """Penalized ridge objective expressed through original-scale coefficients."""
    _, x_mean, x_scale = standardize_design(X)
    n = len(y)
    resid = y - intercept - X @ coef
    return resid @ resid / (2 * n) + 0.5 * lam * np.sum((coef * x_scale) ** 2)


@njit(cache=True, nogil=True)
def _soft(z, g):
    if z > g:
        return z - g
    if z < -g:
        return z + g
    return 0.0


@njit(cache=True, nogil=True)
def _cd_path(XsT, yc, lambdas, beta0, tol, max_sweeps):
    # XsT is the standardized design transposed, so each feature is contiguous
    p, n = XsT.shape
    colsq = np.empty(p)
    for j in range(p):
        colsq[j] = XsT[j] @ XsT[j] / n
    beta = beta0.copy()
    r = yc - XsT.T @ beta
    out = np.empty((lambdas.shape[0], p))
    for k in range(lambdas.shape[0]):
        lam = lambdas[k]
        for _ in range(max_sweeps):
            max_change = 0.0
            for j in range(p):
                if colsq[j] == 0.0:
                    continue
                bj = beta[j]
                rho = (XsT[j] @ r) / n + colsq[j] * bj
                new = _soft(rho, lam) / colsq[j]
                if new != bj:
                    r -= XsT[j] * (new - bj)
                    beta[j] = new
                    change = abs(new - bj)
                    if change > max_change:
                        max_change = change
            if max_change < tol:
                break
        out[k] = beta
    return out


def lasso_lambda_max(Xs, yc):
    return float(np.max(np.abs(Xs.T @ yc)) / len(yc)) if Xs.shape[1] else 0.0


def lasso_lambda_path(X, y, n_lambdas=100, lambda_min_ratio=1e-4):
    """Descending geometric penalty grid from lambda_max to lambda_max * ratio.

    lambda_max is the smallest penalty that zeroes every slope on the
    standardized design. A constant target yields ``[0.0]`` with a warning.
    """
    if n_lambdas < 2:
        raise ValueError("n_lambdas must be at least 2")
    if not 0 < lambda_min_ratio < 1:
        raise ValueError("lambda_min_ratio must lie in (0, 1)")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    Xs, _, _ = standardize_design(X)
    lam_max = lasso_lambda_max(Xs, y - y.mean())
    if not lam_max > 1e-14 * (np.abs(y).max() + 1.0):
        warnings.warn("target has zero variance; lasso path collapses to {0}", LassoPathWarning)
        return np.array([0.0])
    return lam_max * np.geomspace(1.0, lambda_min_ratio, n_lambdas)


def lasso_path_standardized(Xs, yc, lambdas, tol=CD_TOL):
    """Coefficient paths (rows follow ``lambdas``) with warm starts."""
    lambdas = np.ascontiguousarray(lambdas, dtype=float)
    XsT = np.ascontiguousarray(Xs.T)
    beta0 = np.zeros(Xs.shape[1])
    return _cd_path(XsT, np.ascontiguousarray(yc), lambdas, beta0, tol, CD_MAX_SWEEPS)


def fit_lasso(X, y, lam):
    """Lasso at a fixed penalty, approached along a short warm-start path."""
    Xs, x_mean, x_scale = standardize_design(X)
    y_mean = y.mean()
    yc = y - y_mean
    lam_max = lasso_lambda_max(Xs, yc)
    if lam >= lam_max:
        # the KKT conditions hold at zero; skip descent and its rounding
        return _to_original(np.zeros(X.shape[1]), x_mean, x_scale, y_mean)
    if lam > 0:
        lambdas = np.geomspace(lam_max, lam, 20)
    else:
        lambdas = np.append(np.geomspace(lam_max, lam_max * 1e-4, 20), 0.0)
    beta = lasso_path_standardized(Xs, yc, lambdas)[-1]
    return _to_original(beta, x_mean, x_scale, y_mean)


def cv_fold_ids(n, k, seed):
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    folds[rng.permutation(n)] = np.arange(n) % k
    return folds


def select_lambda_cv(X, y, n_lambdas=100, lambda_min_ratio=1e-4, cv_folds=5, seed=0):
    """Choose the lasso penalty by K-fold cross-validation (min-MSE rule).

    Returns ``(lambda_star, table)`` where ``table`` is an array with one
    row per penalty: ``[lambda, cv_mse]``. Ties go to the larger penalty.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if cv_folds < 2:
        raise ValueError("cv_folds must be at least 2")
    if n < cv_folds:
        raise InsufficientData(f"{n} rows cannot be split into {cv_folds} folds")
    lambdas = lasso_lambda_path(X, y, n_lambdas, lambda_min_ratio)
    if lambdas.size == 1:
        return 0.0, np.column_stack([lambdas, [0.0]])
    folds = cv_fold_ids(n, cv_folds, seed)
    sq_err = np.zeros(len(lambdas))
    for k in range(cv_folds):
        test = folds == k
        Xs, x_mean, x_scale = standardize_design(X[~test])
        y_mean = y[~test].mean()
        paths = lasso_path_standardized(Xs, y[~test] - y_mean, lambdas)
        coefs = paths / x_scale
        intercepts = y_mean - coefs @ x_mean
        pred = X[test] @ coefs.T + intercepts
        sq_err += ((y[test][:, None] - pred) ** 2).sum(axis=0)
    mse = sq_err / n
    best = int(np.argmin(mse))  # first minimum = largest penalty among ties
    return float(lambdas[best]), np.column_stack([lambdas, mse])
