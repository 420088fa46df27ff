"""Correlation-matrix simulation lab: random correlation matrices with
beta-distributed partial correlations, dimensionality/imputation-slope
experiments on them, and synthetic panel generation for end-to-end tests.

All randomness flows through numpy's counter-based Philox generator so
results are reproducible across platforms and parallelism levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import DataError
from .linalg import sym_eig_desc
from .em import CovModel
from .panel import PredictorPanel, add_months, panel_from_frames
from .spectral import REPORT_QUANTILES, imputation_slopes, pca_spectrum

SLOPE_ROWS_PER_MATRIX = 1000


def rng_for(seed: int) -> np.random.Generator:
    """Counter-based 64-bit generator with an explicit seed."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class SimConfig:
    j: int = 125
    beta_shape: float = 1.2
    miss_prob: float = 1.0 / 3.0
    n_sims: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.beta_shape <= 0:
            raise DataError("beta_shape must be positive")
        if not (0 <= self.miss_prob < 1):
            raise DataError("miss_prob must be in [0, 1)")
        if self.n_sims < 1:
            raise DataError("n_sims must be at least 1")
        if self.j < 2:
            raise DataError("dimension must be at least 2")


@dataclass(frozen=True)
class DimReport:
    beta_shape: float
    corr_quantiles: dict[float, float]
    eigenvalues: np.ndarray
    variance_share_curve: np.ndarray
    slope_quantiles: dict[float, float]
    mean_abs_slope: float
    n_sims: int


def random_corr(j: int, beta_shape: float, rng: np.random.Generator) -> np.ndarray:
    """Random correlation matrix with partial correlations drawn from
    2*Beta(s, s) - 1 on a canonical vine.

    Layer-ordered composition: the partial correlation of (k, i) given
    variables 0..k-1 is converted to a full correlation through the
    recursive identity r = p * sqrt((1-r_lk^2)(1-r_li^2)) + r_lk * r_li.
    Output is symmetric with unit diagonal and positive definite.
    """
    if j < 2:
        raise DataError("dimension must be at least 2")
    part = np.zeros((j, j))
    iu = np.triu_indices(j, k=1)
    part[iu] = 2.0 * rng.beta(beta_shape, beta_shape, size=iu[0].size) - 1.0
    corr = np.eye(j)
    for k in range(j - 1):
        cols = np.arange(k + 1, j)
        p = part[k, cols].copy()
        for l in range(k - 1, -1, -1):
            p = p * np.sqrt((1.0 - part[l, cols] ** 2) * (1.0 - part[l, k] ** 2)) \
                + part[l, cols] * part[l, k]
        corr[k, cols] = p
        corr[cols, k] = p
    return corr


def _true_sigma_model(sigma: np.ndarray) -> CovModel:
    j = sigma.shape[0]
    return CovModel(0, [f"P{k:03d}" for k in range(j)], np.zeros(j), sigma,
                    iterations=0, converged=True, final_delta=0.0,
                    quasi_loglik_trace=np.array([]))


def run_dim_experiment(cfg: SimConfig,
                       slope_rows: int = SLOPE_ROWS_PER_MATRIX) -> DimReport:
    """Draw correlation matrices, decompose them, and evaluate imputation
    slopes under random missingness using the true matrix.

    Per simulation: draw a correlation matrix, make each (row, predictor)
    cell missing independently with miss_prob, compute the spectrum and the
    stacked slope distribution. The three outputs are averaged over sims.
    """
    corr_q = np.zeros(len(REPORT_QUANTILES))
    slope_q = np.zeros(len(REPORT_QUANTILES))
    eigvals = np.zeros(cfg.j)
    share = np.zeros(cfg.j)
    mean_abs = 0.0
    for s in range(cfg.n_sims):
        rng = rng_for(cfg.seed + s)
        corr = random_corr(cfg.j, cfg.beta_shape, rng)
        off = corr[np.triu_indices(cfg.j, k=1)]
        corr_q += [np.quantile(off, q) for q in REPORT_QUANTILES]
        spec = pca_spectrum(corr)
        eigvals += spec.eigenvalues
        share += spec.variance_share
        mask = rng.random((slope_rows, cfg.j)) >= cfg.miss_prob
        dist = imputation_slopes(_true_sigma_model(corr), mask)
        slope_q += [dist.quantiles[q] for q in REPORT_QUANTILES]
        mean_abs += dist.mean_abs
    n = cfg.n_sims
    return DimReport(cfg.beta_shape,
                     dict(zip(REPORT_QUANTILES, corr_q / n)),
                     eigvals / n, share / n,
                     dict(zip(REPORT_QUANTILES, slope_q / n)),
                     mean_abs / n, n)


def report_frames(report: DimReport) -> dict[str, pd.DataFrame]:
    """The three report tables: correlation quantiles, variance-share curve,
    slope distribution (with the mean absolute slope appended)."""
    corr = pd.DataFrame({"quantile": list(report.corr_quantiles),
                         "value": list(report.corr_quantiles.values())})
    spectrum = pd.DataFrame({"k": np.arange(1, report.eigenvalues.size + 1),
                             "eigenvalue": report.eigenvalues,
                             "cum_share": report.variance_share_curve})
    slopes = pd.DataFrame({"quantile": [*map(str, report.slope_quantiles)] + ["mean_abs"],
                           "value": [*report.slope_quantiles.values(), report.mean_abs_slope]})
    return {"corr_quantiles": corr, "variance_share": spectrum,
            "slope_distribution": slopes}


def synth_panel(j: int, n: int, months, true_sigma: np.ndarray,
                signal: np.ndarray | None = None, noise_sd: float = 0.05,
                rng: np.random.Generator | None = None) -> PredictorPanel:
    """Synthetic panel: predictors drawn from N(0, Sigma) each month,
    next-month returns X beta + noise when a signal is given, log-normal
    market caps. Deterministic under a fixed generator.

    signal is expressed in principal-component coordinates of true_sigma
    (entry k loads on the kth PC); shorter vectors are zero-padded.
    """
    rng = rng if rng is not None else rng_for(0)
    true_sigma = np.asarray(true_sigma, dtype=float)
    if true_sigma.shape != (j, j):
        raise DataError("true_sigma has the wrong shape")
    vals, vecs = sym_eig_desc(true_sigma)
    if vals.min() < -1e-10 * max(vals.max(), 1.0):
        raise DataError("true_sigma is not positive semidefinite")
    chol = vecs * np.sqrt(np.maximum(vals, 0.0))

    if isinstance(months, int):
        months = [add_months(200001, k) for k in range(months)]
    months = [int(m) for m in months]
    beta = np.zeros(j)
    if signal is not None:
        signal = np.asarray(signal, dtype=float)
        beta = vecs[:, :signal.size] @ signal

    stocks = [f"S{i:04d}" for i in range(n)]
    preds = [f"P{k:03d}" for k in range(j)]
    obs_rows, ret_rows, cap_rows = [], [], []
    for m in months:
        x = rng.standard_normal((n, j)) @ chol.T
        r = x @ beta + noise_sd * rng.standard_normal(n)
        caps = np.exp(rng.standard_normal(n))
        nxt = add_months(m, 1)
        for i, s in enumerate(stocks):
            ret_rows.append((s, nxt, float(r[i])))
            cap_rows.append((s, m, float(caps[i])))
        obs_rows.append(pd.DataFrame({
            "stock_id": np.repeat(stocks, j), "yyyymm": m,
            "predictor": np.tile(preds, n), "value": x.ravel()}))
    obs = pd.concat(obs_rows, ignore_index=True)
    returns = pd.DataFrame(ret_rows, columns=["stock_id", "yyyymm", "ret"])
    caps = pd.DataFrame(cap_rows, columns=["stock_id", "yyyymm", "cap"])
    return panel_from_frames(obs, returns, caps)


def drop_observations(panel: PredictorPanel, miss_prob: float,
                      rng: np.random.Generator) -> PredictorPanel:
    """Copy of the panel with each observation removed independently with
    probability miss_prob (returns and caps untouched)."""
    keep = rng.random(len(panel.observations)) >= miss_prob
    obs = panel.observations[keep].reset_index(drop=True)
    return PredictorPanel(obs, panel.returns, panel.market_caps,
                          panel.predictor_meta, panel.month_range)
