"""Maximum-likelihood estimation of (mu, Sigma) under a multivariate normal
model with arbitrary missingness, and conditional-mean imputation.

The observed-data likelihood is maximized by alternating expectation and
maximization steps. Each distinct missingness pattern requires one SPD
factorization of the observed-observed covariance block per iteration; the
factorization is cached per pattern and reused for every row sharing it.
All row contributions accumulate in ascending row order so the grouped path
is bit-identical to a row-by-row evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError, NumericalError
from .linalg import SpdFactor, psd_project
from .panel import CrossSection

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class CovModel:
    """Fitted mean vector and covariance matrix for one month, with
    convergence metadata."""

    month: int
    predictor_ids: list[str]
    mu: np.ndarray
    sigma: np.ndarray
    iterations: int
    converged: bool
    final_delta: float
    quasi_loglik_trace: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class ConditionalMoments:
    """Conditional first and second moments of one masked row."""

    row_index: int
    e: np.ndarray
    s: np.ndarray


def _pattern_ops(sigma: np.ndarray, obs: np.ndarray, mis: np.ndarray):
    """Regression weights W = Sigma_mo Sigma_oo^-1 and conditional covariance
    C = Sigma_mm - W Sigma_om for one missingness pattern."""
    if obs.size == 0:
        return np.zeros((mis.size, 0)), sigma[np.ix_(mis, mis)].copy(), None
    factor = SpdFactor(sigma[np.ix_(obs, obs)])
    solved = factor.solve(sigma[np.ix_(obs, mis)])  # Sigma_oo^-1 Sigma_om
    w = solved.T
    c = sigma[np.ix_(mis, mis)] - sigma[np.ix_(mis, obs)] @ solved
    return w, 0.5 * (c + c.T), factor


def conditional_moments(x_row: np.ndarray, mu: np.ndarray,
                        sigma: np.ndarray, row_index: int = 0) -> ConditionalMoments:
    """Conditional mean and second moment of a row with NaN-marked missing
    entries, under N(mu, sigma)."""
    x_row = np.asarray(x_row, dtype=float)
    mu = np.asarray(mu, dtype=float)
    obs = np.flatnonzero(np.isfinite(x_row))
    mis = np.flatnonzero(~np.isfinite(x_row))
    w, c, _ = _pattern_ops(np.asarray(sigma, dtype=float), obs, mis)
    e = x_row.copy()
    e[mis] = mu[mis] + w @ (x_row[obs] - mu[obs]) if obs.size else mu[mis]
    s = np.outer(e, e)
    s[np.ix_(mis, mis)] += c
    return ConditionalMoments(row_index, e, 0.5 * (s + s.T))


def _iter_rows(cs: CrossSection, mu: np.ndarray, sigma: np.ndarray, grouped: bool):
    """Yield (i, obs, mis, w, c) for every row in ascending row order.

    grouped=True computes (w, c) once per distinct mask row; grouped=False
    recomputes them for every row. Both paths perform identical per-row
    arithmetic, so downstream accumulations agree bit for bit.
    """
    cache: dict[bytes, tuple] = {}
    for i in range(cs.n_stocks):
        row_mask = cs.mask[i]
        obs = np.flatnonzero(row_mask)
        mis = np.flatnonzero(~row_mask)
        if grouped:
            key = row_mask.tobytes()
            if key not in cache:
                cache[key] = _pattern_ops(sigma, obs, mis)[:2]
            w, c = cache[key]
        else:
            w, c, _ = _pattern_ops(sigma, obs, mis)
        yield i, obs, mis, w, c


def _estep(cs: CrossSection, mu: np.ndarray, sigma: np.ndarray,
           grouped: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Conditional means for every row plus the summed conditional covariance."""
    n, j = cs.n_stocks, cs.n_predictors
    e_rows = np.empty((n, j))
    sum_c = np.zeros((j, j))
    x = cs.values
    for i, obs, mis, w, c in _iter_rows(cs, mu, sigma, grouped):
        e = x[i].copy()
        if mis.size:
            e[mis] = mu[mis] + (w @ (x[i, obs] - mu[obs]) if obs.size else 0.0)
            sum_c[np.ix_(mis, mis)] += c
        e_rows[i] = e
    return e_rows, sum_c


def quasi_loglik(cs: CrossSection, mu: np.ndarray, sigma: np.ndarray) -> float:
    """Sum over rows of the log density of the observed sub-vector under
    N(mu, sigma) restricted to the observed coordinates."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    total = 0.0
    for key, rows in cs.pattern_index.items():
        row_mask = np.frombuffer(key, dtype=bool)
        obs = np.flatnonzero(row_mask)
        if obs.size == 0:
            continue
        factor = SpdFactor(sigma[np.ix_(obs, obs)])
        dev = cs.values[np.ix_(rows, obs)] - mu[obs]
        quad = np.einsum("ij,ij->i", dev, factor.solve(dev.T).T)
        total += -0.5 * float(np.sum(quad)) \
                 - 0.5 * len(rows) * (obs.size * LOG_2PI + factor.log_det)
    return total


def _available_case_start(cs: CrossSection) -> tuple[np.ndarray, np.ndarray]:
    """Warm start: observed column means and the PSD-projected available-case
    covariance (pairwise-complete cross moments, observed-column variances on
    the diagonal)."""
    x, mask = cs.values, cs.mask
    j = cs.n_predictors
    mu = np.array([x[mask[:, k], k].mean() for k in range(j)])
    filled = np.where(mask, x - mu, 0.0)
    m = mask.astype(float)
    counts = m.T @ m
    cov = (filled.T @ filled) / np.maximum(counts, 1.0)
    cov[counts == 0] = 0.0
    var = np.array([filled[mask[:, k], k].var() for k in range(j)])
    np.fill_diagonal(cov, np.maximum(var, 1e-12))
    return mu, psd_project(cov)


def em_fit(cs: CrossSection, tol: float = 1e-4, max_iter: int = 10000) -> CovModel:
    """Fit (mu, Sigma) by EM; stops when the max-norm parameter step is <= tol.

    Every predictor needs at least two observations in the month. The
    quasi-log-likelihood is recorded once per iteration and is nondecreasing.
    """
    n = cs.n_stocks
    obs_counts = cs.mask.sum(axis=0)
    thin = np.flatnonzero(obs_counts < 2)
    if thin.size:
        raise DataError(
            f"predictors with <2 observations in {cs.month}: "
            f"{[cs.predictor_ids[k] for k in thin]}")

    mu, sigma = _available_case_start(cs)
    trace = [quasi_loglik(cs, mu, sigma)]
    converged = False
    delta = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        e_rows, sum_c = _estep(cs, mu, sigma, grouped=True)
        mu_new = e_rows.sum(axis=0) / n
        sigma_new = (e_rows.T @ e_rows + sum_c) / n - np.outer(mu_new, mu_new)
        sigma_new = 0.5 * (sigma_new + sigma_new.T)
        if not (np.isfinite(mu_new).all() and np.isfinite(sigma_new).all()):
            raise NumericalError(f"non-finite EM update at iteration {iterations}")
        delta = max(float(np.abs(mu_new - mu).max()),
                    float(np.abs(sigma_new - sigma).max()))
        mu, sigma = mu_new, sigma_new
        trace.append(quasi_loglik(cs, mu, sigma))
        if delta <= tol:
            converged = True
            break
    return CovModel(cs.month, list(cs.predictor_ids), mu, sigma, iterations,
                    converged, float(delta), np.asarray(trace))


def impute_em(cs: CrossSection, model: CovModel) -> np.ndarray:
    """Fill missing cells with conditional means under the fitted model;
    observed cells are returned unchanged."""
    if list(cs.predictor_ids) != list(model.predictor_ids):
        raise DataError("cross-section and model predictor lists differ")
    filled = cs.values.copy()
    mu, sigma = model.mu, model.sigma
    cache: dict[bytes, np.ndarray] = {}
    for key, rows in cs.pattern_index.items():
        row_mask = np.frombuffer(key, dtype=bool)
        mis = np.flatnonzero(~row_mask)
        if mis.size == 0:
            continue
        obs = np.flatnonzero(row_mask)
        if key not in cache:
            cache[key] = _pattern_ops(sigma, obs, mis)[0]
        w = cache[key]
        for i in rows:
            filled[i, mis] = mu[mis] + (w @ (cs.values[i, obs] - mu[obs])
                                        if obs.size else 0.0)
    return filled


def save_cov_model(model: CovModel, outdir) -> None:
    outdir = Path(outdir)
    pd.DataFrame({"predictor": model.predictor_ids, "mu": model.mu}) \
        .to_csv(outdir / f"mu_{model.month}.csv", index=False)
    pd.DataFrame(model.sigma, index=model.predictor_ids,
                 columns=model.predictor_ids) \
        .to_csv(outdir / f"sigma_{model.month}.csv")
    meta = {"iterations": model.iterations, "converged": model.converged,
            "final_delta": model.final_delta}
    (outdir / f"em_{model.month}.json").write_text(json.dumps(meta, indent=1))


def load_cov_model(outdir, month: int) -> CovModel:
    outdir = Path(outdir)
    mu_df = pd.read_csv(outdir / f"mu_{month}.csv")
    sig_df = pd.read_csv(outdir / f"sigma_{month}.csv", index_col=0)
    meta = json.loads((outdir / f"em_{month}.json").read_text())
    return CovModel(month, list(mu_df["predictor"]), mu_df["mu"].to_numpy(),
                    sig_df.to_numpy(dtype=float), int(meta["iterations"]),
                    bool(meta["converged"]), float(meta["final_delta"]),
                    np.array([]))
