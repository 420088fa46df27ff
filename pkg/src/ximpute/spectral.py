"""Correlation and covariance diagnostics: pairwise-complete correlations,
model-implied correlations, PCA variance decomposition, return-scaled
predictors, and the distribution of imputation slopes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import DataError, NumericalError
from .linalg import sym_eig_desc
from .em import CovModel
from .panel import CrossSection, build_pattern_index

REPORT_QUANTILES = (0.01, 0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95, 0.99)
PERCENT_GUARD = 1e-6


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray = field(repr=False)
    variance_share: np.ndarray


@dataclass(frozen=True)
class SlopeDistribution:
    """All imputation-slope entries stacked over (stock, missing predictor)
    pairs, with summary statistics."""

    slopes: np.ndarray = field(repr=False)
    mean_abs: float
    quantiles: dict[float, float]


@dataclass(frozen=True)
class CorrDifferenceStats:
    level: np.ndarray = field(repr=False)
    percent: np.ndarray = field(repr=False)
    level_mean_abs: float
    percent_mean_abs: float
    level_quantiles: dict[float, float]
    percent_quantiles: dict[float, float]


def _quantiles(values: np.ndarray, qs=REPORT_QUANTILES) -> dict[float, float]:
    if values.size == 0:
        return {q: float("nan") for q in qs}
    return {q: float(np.quantile(values, q)) for q in qs}


def available_case_corr(cs: CrossSection) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise-complete Pearson correlations.

    Returns (corr, defined) where defined[j, k] is False when a pair has
    fewer than 2 jointly observed rows or zero variance on the joint sample;
    such entries are NaN in corr.
    """
    x, mask = cs.values, cs.mask
    j = cs.n_predictors
    corr = np.full((j, j), np.nan)
    defined = np.zeros((j, j), dtype=bool)
    np.fill_diagonal(corr, 1.0)
    np.fill_diagonal(defined, True)
    for a in range(j):
        for b in range(a + 1, j):
            joint = mask[:, a] & mask[:, b]
            if joint.sum() < 2:
                continue
            xa, xb = x[joint, a], x[joint, b]
            da, db = xa - xa.mean(), xb - xb.mean()
            denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
            if denom <= 0:
                continue
            corr[a, b] = corr[b, a] = float(np.sum(da * db) / denom)
            defined[a, b] = defined[b, a] = True
    return corr, defined


def em_corr(model: CovModel) -> np.ndarray:
    """Model covariance rescaled to unit diagonal."""
    d = np.diag(model.sigma)
    if np.any(d <= 0):
        raise NumericalError("covariance has a non-positive diagonal entry")
    s = 1.0 / np.sqrt(d)
    out = model.sigma * np.outer(s, s)
    np.fill_diagonal(out, 1.0)
    return out


def corr_difference_stats(em: np.ndarray, obs: np.ndarray) -> CorrDifferenceStats:
    """Per-pair level and percent differences between two correlation
    matrices; pairs with undefined or near-zero observed correlation are
    excluded from the percent panel."""
    em = np.asarray(em, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if em.shape != obs.shape:
        raise DataError("correlation matrices have different shapes")
    iu = np.triu_indices(em.shape[0], k=1)
    e, o = em[iu], obs[iu]
    keep = np.isfinite(o) & np.isfinite(e)
    level = e[keep] - o[keep]
    big = np.abs(o[keep]) >= PERCENT_GUARD
    percent = level[big] / np.abs(o[keep][big]) * 100.0
    return CorrDifferenceStats(level, percent,
                               float(np.mean(np.abs(level))) if level.size else float("nan"),
                               float(np.mean(np.abs(percent))) if percent.size else float("nan"),
                               _quantiles(level), _quantiles(percent))


def pca_spectrum(sigma: np.ndarray) -> Spectrum:
    """Full symmetric eigendecomposition with descending eigenvalues and a
    cumulative variance-share curve."""
    vals, vecs = sym_eig_desc(sigma)
    total = float(vals.sum())
    if total <= 0:
        raise NumericalError("total variance is not positive")
    return Spectrum(vals, vecs, np.cumsum(vals) / total)


def pooled_covariance(matrices: list[np.ndarray],
                      per_month_demean: bool = False) -> np.ndarray:
    """Covariance pooled across months: rows demeaned by the pooled mean
    (or per-month means), then sum of outer products over total row count."""
    if not matrices:
        raise DataError("pooled_covariance needs at least one matrix")
    mats = [np.asarray(m, dtype=float) for m in matrices]
    j = mats[0].shape[1]
    if any(m.shape[1] != j for m in mats):
        raise DataError("matrices share no common predictor list")
    if per_month_demean:
        mats = [m - m.mean(axis=0) for m in mats]
        mean = np.zeros(j)
    else:
        n_tot = sum(m.shape[0] for m in mats)
        mean = sum(m.sum(axis=0) for m in mats) / n_tot
    acc = np.zeros((j, j))
    n_tot = 0
    for m in mats:
        d = m - mean
        acc += d.T @ d
        n_tot += m.shape[0]
    out = acc / n_tot
    return 0.5 * (out + out.T)


def scaled_predictors(matrices: list[np.ndarray], next_returns: list[np.ndarray]
                      ) -> tuple[list[np.ndarray], np.ndarray]:
    """Scale each predictor by its pooled univariate OLS slope against the
    next month's return.

    matrices[m] holds predictors at formation month m; next_returns[m] holds
    the aligned following-month returns (NaN where unavailable). Returns the
    scaled matrices and the slope vector.
    """
    if len(matrices) != len(next_returns):
        raise DataError("matrices and returns are misaligned")
    j = matrices[0].shape[1]
    xs = np.vstack(matrices)
    rs = np.concatenate([np.asarray(r, dtype=float) for r in next_returns])
    keep = np.isfinite(rs)
    xs, rs = xs[keep], rs[keep]
    if xs.shape[0] < 2:
        raise DataError("not enough predictor/return pairs")
    gamma = np.empty(j)
    for k in range(j):
        xk = xs[:, k]
        dx = xk - xk.mean()
        sxx = float(np.sum(dx * dx))
        if sxx <= 0:
            raise DataError(f"predictor column {k} has zero variance in the window")
        gamma[k] = float(np.sum(dx * (rs - rs.mean())) / sxx)
    return [m * gamma for m in matrices], gamma


def imputation_slopes(model: CovModel, mask: np.ndarray) -> SlopeDistribution:
    """Stack the conditional-mean regression coefficients for every
    (row, missing predictor) pair implied by the mask.

    For a row with observed set O and a missing predictor j, the slope
    vector is Sigma[j, O] Sigma[O, O]^-1; its entries measure the response
    of the imputed value to a one-standard-deviation move in each observed
    predictor.
    """
    mask = np.asarray(mask, dtype=bool)
    sigma = model.sigma
    chunks = []
    for key, rows in build_pattern_index(mask).items():
        row_mask = np.frombuffer(key, dtype=bool)
        obs = np.flatnonzero(row_mask)
        mis = np.flatnonzero(~row_mask)
        if obs.size == 0 or mis.size == 0:
            continue
        s_oo = sigma[np.ix_(obs, obs)]
        s_om = sigma[np.ix_(obs, mis)]
        try:
            betas = sla.cho_solve(sla.cho_factor(s_oo, lower=True), s_om).T
        except np.linalg.LinAlgError:
            # PSD input keeps the system consistent even when the observed
            # block is numerically singular; take the minimum-norm solution.
            betas = np.linalg.lstsq(s_oo, s_om, rcond=None)[0].T
        flat = betas.ravel()
        chunks.extend([flat] * len(rows))
    slopes = np.concatenate(chunks) if chunks else np.empty(0)
    mean_abs = float(np.mean(np.abs(slopes))) if slopes.size else 0.0
    return SlopeDistribution(slopes, mean_abs, _quantiles(slopes))
