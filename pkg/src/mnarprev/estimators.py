"""Reference estimators under ignorable nonresponse, and RMSE scoring."""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from .data import YEAR_INDEX, DataError, PersonRecord
from .model import birth_cohort
from .trends import TrendTable

Z95 = stats.norm.ppf(0.975)


def wilson_interval(k, n, z: float = Z95):
    """Wilson score interval for k successes out of n (arrays allowed)."""
    k = np.asarray(k, dtype=float)
    n = np.asarray(n, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = k / n
        denom = 1 + z**2 / n
        centre = (p + z**2 / (2 * n)) / denom
        half = z * np.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    return centre - half, centre + half


def _cell_of(rec: PersonRecord) -> tuple[int, int, int]:
    if rec.region is None:
        raise DataError(f"record {rec.id}: region missing; impute before estimation")
    return YEAR_INDEX[rec.study_year], rec.region, rec.gender


def complete_case_prevalence(records: Sequence[PersonRecord]) -> TrendTable:
    """Smoking prevalence (%) among participants with Wilson 95% intervals.

    Cells without participants are NaN.
    """
    k = np.zeros((8, 2, 2))
    n = np.zeros((8, 2, 2))
    for rec in records:
        if rec.participation != 1:
            continue
        idx = _cell_of(rec)
        n[idx] += 1
        k[idx] += rec.smoking
    with np.errstate(invalid="ignore", divide="ignore"):
        est = 100.0 * k / n
    lo, hi = wilson_interval(k, n)
    return TrendTable("Complete case", est, 100.0 * lo, 100.0 * hi)


# --- logistic imputation model ------------------------------------------------------

FOLLOW_UP_AGE_CENTRE = 60.0


def imputation_design(records: Sequence[PersonRecord]) -> np.ndarray:
    """Covariates of the smoking imputation model.

    * one intercept and one birth-year slope per gender x region x year cell;
    * event indicator and its interaction with gender;
    * age at event or censoring, with a separate slope per gender x event.
    """
    n = len(records)
    X = np.zeros((n, 70))
    for i, rec in enumerate(records):
        s, r, g = _cell_of(rec)
        c = (g * 2 + r) * 8 + s
        X[i, c] = 1.0
        X[i, 32 + c] = birth_cohort(rec.study_year, rec.age)
        e = rec.event_flag
        X[i, 64] = e
        X[i, 65] = e * g
        X[i, 66 + 2 * g + e] = rec.t_obs - FOLLOW_UP_AGE_CENTRE
    return X


def fit_logistic(X, y, ridge: float = 0.0, max_iter: int = 100, tol: float = 1e-10):
    """Newton-Raphson for logistic regression with an optional ridge penalty.

    Returns ``(coef, cov, converged)`` where ``cov`` is the inverse of the
    penalised observed information at the mode.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    p = X.shape[1]
    beta = np.zeros(p)
    pen = ridge * np.eye(p)
    converged = False
    info = None
    for _ in range(max_iter):
        mu = expit(X @ beta)
        grad = X.T @ (y - mu) - pen @ beta
        info = (X * (mu * (1 - mu))[:, None]).T @ X + pen
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            break
        beta = beta + step
        if not np.all(np.isfinite(beta)):
            break
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    if info is None:
        raise ValueError("empty design")
    mu = expit(X @ beta)
    info = (X * (mu * (1 - mu))[:, None]).T @ X + pen
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(info)
        converged = False
    return beta, cov, converged


def _fit_imputation_model(X, y):
    active = np.flatnonzero(np.any(X != 0, axis=0))
    beta, cov, ok = fit_logistic(X[:, active], y)
    if not ok or np.max(np.abs(beta)) > 15 or not np.all(np.isfinite(cov)):
        warnings.warn(
            "imputation model did not converge (likely separation); refitting with a ridge penalty",
            RuntimeWarning,
            stacklevel=3,
        )
        beta, cov, _ = fit_logistic(X[:, active], y, ridge=0.1)
    full_beta = np.zeros(X.shape[1])
    full_cov = np.zeros((X.shape[1], X.shape[1]))
    full_beta[active] = beta
    full_cov[np.ix_(active, active)] = cov
    return full_beta, full_cov


def rubin_pool(estimates, variances, level: float = 0.95):
    """Pool per-imputation estimates and variances (arrays of shape (m, ...)).

    Returns ``(mean, lower, upper, between)``; the reference distribution is
    Student t with the classical degrees of freedom, normal when there is no
    between-imputation variance.
    """
    q = np.asarray(estimates, dtype=float)
    u = np.asarray(variances, dtype=float)
    m = q.shape[0]
    if m < 2:
        raise ValueError("need at least two imputations")
    qbar = q.mean(axis=0)
    ubar = u.mean(axis=0)
    b = q.var(axis=0, ddof=1)
    total = ubar + (1 + 1 / m) * b
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (1 + 1 / m) * b / ubar
        df = np.where(b > 0, (m - 1) * (1 + 1 / r) ** 2, np.inf)
    crit = stats.t.ppf(0.5 + level / 2, df)
    half = crit * np.sqrt(total)
    return qbar, qbar - half, qbar + half, b


def mar_multiple_imputation(records: Sequence[PersonRecord], m: int = 5, seed: int | None = 0) -> TrendTable:
    """Multiple imputation of non-participants' smoking under MAR.

    The imputation model is fitted on participants; each imputation draws
    coefficients from the normal approximation at the mode, then smoking for
    every non-participant.  Cell prevalences are pooled with Rubin's rules.
    """
    if m < 2:
        raise ValueError("m must be at least 2")
    records = list(records)
    X = imputation_design(records)
    part = np.array([rec.participation == 1 for rec in records])
    y_obs = np.array([rec.smoking if rec.participation else 0 for rec in records], dtype=float)
    cells = np.array([np.ravel_multi_index(_cell_of(rec), (8, 2, 2)) for rec in records])
    sizes = np.bincount(cells, minlength=32).astype(float)

    beta, cov = _fit_imputation_model(X[part], y_obs[part])
    # factor through eigendecomposition; cov may be singular on inactive columns
    w, v = np.linalg.eigh(cov)
    root = v * np.sqrt(np.clip(w, 0, None))

    rng = np.random.default_rng(seed)
    miss = np.flatnonzero(~part)
    estimates = np.empty((m, 32))
    variances = np.empty((m, 32))
    for j in range(m):
        b = beta + root @ rng.standard_normal(beta.size)
        y = y_obs.copy()
        if miss.size:
            y[miss] = rng.random(miss.size) < expit(X[miss] @ b)
        with np.errstate(invalid="ignore", divide="ignore"):
            p = np.bincount(cells, weights=y, minlength=32) / sizes
        estimates[j] = 100.0 * p
        variances[j] = 100.0**2 * p * (1 - p) / sizes
    qbar, lo, hi, _ = rubin_pool(estimates, variances)
    shape = (8, 2, 2)
    return TrendTable("MI", qbar.reshape(shape), lo.reshape(shape), hi.reshape(shape))


def rmse(estimated, truth) -> float:
    """Root mean squared error (percentage points) over all 32 cells."""
    est = estimated.estimate if isinstance(estimated, TrendTable) else np.asarray(estimated, dtype=float)
    tru = truth.estimate if isinstance(truth, TrendTable) else np.asarray(truth, dtype=float)
    if est.shape != tru.shape or est.size != 32:
        raise ValueError(f"cell mismatch: {est.shape} vs {tru.shape}; expected 32 cells")
    if np.isnan(est).any() or np.isnan(tru).any():
        raise ValueError("cell mismatch: missing cells")
    return float(np.sqrt(np.mean((est - tru) ** 2)))
