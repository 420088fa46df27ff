"""Uniform interface over the six imputation methods.

Ad-hoc methods: cross-sectional mean, industry/size-group mean, last
observed value. Likelihood methods: multivariate-normal EM, EM on AR1
residuals, and alternating least squares for a low-rank factor model.
All methods leave observed cells untouched and return fully finite
matrices with per-cell provenance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import em as em_mod
from .errors import DataError
from .panel import CrossSection, PredictorPanel, add_months
from .pipeline import TransformCache
from .transform import TransformParams, apply_transform

METHODS = ("simple_mean", "group_mean", "last_observed",
           "mvn_em", "ar1_em", "ppca_em")

PROV_OBSERVED = "O"
PROV_PRIMARY = "P"
PROV_FALLBACK = "F"


@dataclass(frozen=True)
class ImputerSpec:
    """Method name plus method-specific parameters.

    Recognized params: tol, max_iter (EM family); factors (ppca_em);
    window, min_pairs (ar1_em); lookback (last_observed); industry
    (group_mean, stock -> code mapping); transform ('boxcox'|'standardize').
    """

    method: str
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise DataError(f"unknown imputation method: {self.method!r}")
        check = {"tol": lambda v: v > 0, "max_iter": lambda v: v >= 1,
                 "factors": lambda v: v >= 1, "window": lambda v: v >= 2,
                 "lookback": lambda v: v >= 1, "min_pairs": lambda v: v >= 2}
        for key, ok in check.items():
            if key in self.params and not ok(self.params[key]):
                raise DataError(f"invalid {key}={self.params[key]!r} for {self.method}")


@dataclass(frozen=True)
class ImputedCrossSection:
    cs: CrossSection
    filled: np.ndarray
    provenance: np.ndarray
    info: dict = field(default_factory=dict)


def _finish(cs: CrossSection, filled: np.ndarray, provenance: np.ndarray,
            info: dict | None = None) -> ImputedCrossSection:
    if not np.isfinite(filled).all():
        raise DataError("imputation left non-finite cells")
    if not np.array_equal(provenance == PROV_OBSERVED, cs.mask):
        raise DataError("provenance disagrees with the observed mask")
    return ImputedCrossSection(cs, filled, provenance, info or {})


def _new_provenance(cs: CrossSection) -> np.ndarray:
    prov = np.full(cs.mask.shape, PROV_PRIMARY, dtype="<U1")
    prov[cs.mask] = PROV_OBSERVED
    return prov


def _column_means(cs: CrossSection) -> np.ndarray:
    means = np.empty(cs.n_predictors)
    for k in range(cs.n_predictors):
        col = cs.values[cs.mask[:, k], k]
        if col.size == 0:
            raise DataError(f"predictor {cs.predictor_ids[k]!r} entirely missing in {cs.month}")
        means[k] = col.mean()
    return means


def impute_simple_mean(cs: CrossSection) -> ImputedCrossSection:
    """Missing cells get the month's observed per-predictor mean."""
    means = _column_means(cs)
    filled = np.where(cs.mask, cs.values, means)
    return _finish(cs, filled, _new_provenance(cs))


def impute_group_mean(cs: CrossSection, industry: Mapping[str, str],
                      caps: Mapping[str, float]) -> ImputedCrossSection:
    """Group means over (3-digit industry) x (size bin within industry).

    Industries with fewer than 10 stocks use min(n, 10) size bins. Empty
    groups fall back to the industry mean, then the cross-sectional mean;
    fallbacks are marked in the provenance.
    """
    xmeans = _column_means(cs)
    codes = [str(industry.get(s, ""))[:3] for s in cs.stock_ids]
    group_of = np.empty(cs.n_stocks, dtype=int)
    groups: dict[tuple[str, int], int] = {}
    ind_rows: dict[str, list[int]] = {}
    for code in sorted(set(codes)):
        rows = [i for i, c in enumerate(codes) if c == code]
        ind_rows[code] = rows
        nbins = min(len(rows), 10)
        order = sorted(rows, key=lambda i: (caps.get(cs.stock_ids[i], -np.inf),
                                            cs.stock_ids[i]))
        for rank, i in enumerate(order):
            key = (code, rank * nbins // len(rows))
            group_of[i] = groups.setdefault(key, len(groups))

    filled = cs.values.copy()
    prov = _new_provenance(cs)
    for k in range(cs.n_predictors):
        col, mk = cs.values[:, k], cs.mask[:, k]
        gsum = np.zeros(len(groups))
        gcnt = np.zeros(len(groups))
        np.add.at(gsum, group_of[mk], col[mk])
        np.add.at(gcnt, group_of[mk], 1)
        ind_mean = {c: (col[rows][mk[rows]].mean() if mk[rows].any() else np.nan)
                    for c, rows in ind_rows.items()}
        for i in np.flatnonzero(~mk):
            g = group_of[i]
            if gcnt[g] > 0:
                filled[i, k] = gsum[g] / gcnt[g]
            elif np.isfinite(ind_mean[codes[i]]):
                filled[i, k] = ind_mean[codes[i]]
                prov[i, k] = PROV_FALLBACK
            else:
                filled[i, k] = xmeans[k]
                prov[i, k] = PROV_FALLBACK
    return _finish(cs, filled, prov)


def impute_last_observed(panel: PredictorPanel, cs: CrossSection,
                         params: Mapping[str, TransformParams],
                         lookback: int = 12) -> ImputedCrossSection:
    """Most recent raw value within the lookback window, re-standardized
    under the current month's transform; cross-sectional mean otherwise."""
    xmeans = _column_means(cs)
    filled = cs.values.copy()
    prov = _new_provenance(cs)
    srow = {s: i for i, s in enumerate(cs.stock_ids)}
    for k, pred in enumerate(cs.predictor_ids):
        missing = {cs.stock_ids[i] for i in np.flatnonzero(~cs.mask[:, k])}
        for back in range(1, lookback + 1):
            if not missing:
                break
            hist = panel.raw_column(add_months(cs.month, -back), pred)
            for stock in list(missing):
                if stock in hist.index:
                    raw = float(hist[stock])
                    filled[srow[stock], k] = float(
                        apply_transform(params[pred], np.array([raw]))[0])
                    missing.discard(stock)
        for stock in missing:
            filled[srow[stock], k] = xmeans[k]
            prov[srow[stock], k] = PROV_FALLBACK
    return _finish(cs, filled, prov)


def impute_mvn_em(cs: CrossSection, tol: float = 1e-4,
                  max_iter: int = 10000) -> ImputedCrossSection:
    """Conditional-mean imputation under the EM-fitted normal model."""
    model = em_mod.em_fit(cs, tol=tol, max_iter=max_iter)
    filled = em_mod.impute_em(cs, model)
    return _finish(cs, filled, _new_provenance(cs), {"model": model})


def impute_ar1_em(panel: PredictorPanel, month: int, predictors: list[str],
                  tcache: TransformCache, window: int = 60, min_pairs: int = 24,
                  tol: float = 1e-4, max_iter: int = 10000) -> ImputedCrossSection:
    """Per-predictor AR1 on transformed values, then EM on the residual
    cross-section; imputations add the AR1 prediction back when the lagged
    value is observed.

    The AR1 slope is no-intercept OLS pooled over the window; predictors
    with fewer than min_pairs usable (current, lag) pairs fall back to
    slope 0, which reduces the method to plain EM for that predictor.
    """
    month = int(month)
    first = add_months(month, -(window - 1))
    cs, _ = tcache.cross_section(month, predictors)

    def col(m: int, pred: str) -> dict:
        try:
            return tcache.column(m, pred)[1]
        except DataError:
            return {}

    phi = np.zeros(cs.n_predictors)
    lags = np.full_like(cs.values, np.nan)
    for k, pred in enumerate(cs.predictor_ids):
        h = int(panel.predictor_meta.get(pred, 1))
        sxy = sxx = 0.0
        pairs = 0
        for t in [add_months(first, d) for d in range(window)]:
            t_lag = add_months(t, -h)
            if t_lag < first:
                continue
            cur, lag = col(t, pred), col(t_lag, pred)
            for stock, x in cur.items():
                xl = lag.get(stock)
                if xl is not None:
                    sxy += x * xl
                    sxx += xl * xl
                    pairs += 1
        if pairs >= min_pairs and sxx > 0:
            phi[k] = sxy / sxx
        lag_col = col(add_months(month, -h), pred)
        lags[:, k] = [lag_col.get(s, np.nan) for s in cs.stock_ids]

    lag_ok = np.isfinite(lags)
    # Residual is defined where the current value is observed and either the
    # lag is observed or the AR1 term vanishes; thin residual columns force
    # the slope-0 fallback so EM keeps >= 2 observations per column.
    for k in range(cs.n_predictors):
        if phi[k] != 0.0 and (cs.mask[:, k] & lag_ok[:, k]).sum() < 2:
            phi[k] = 0.0
    res_mask = cs.mask & (lag_ok | (phi == 0.0))
    resid = np.where(res_mask, cs.values - np.where(phi == 0.0, 0.0, phi * np.where(lag_ok, lags, 0.0)), np.nan)
    res_cs = cs.with_values(resid, res_mask)

    model = em_mod.em_fit(res_cs, tol=tol, max_iter=max_iter)
    eps = em_mod.impute_em(res_cs, model)

    filled = cs.values.copy()
    prov = _new_provenance(cs)
    for i, k in zip(*np.where(~cs.mask)):
        if lag_ok[i, k]:
            filled[i, k] = phi[k] * lags[i, k] + eps[i, k]
        else:
            filled[i, k] = eps[i, k]
            prov[i, k] = PROV_FALLBACK
    return _finish(cs, filled, prov, {"model": model, "phi": phi})


def impute_ppca_em(cs: CrossSection, factors: int = 60, max_iter: int = 500,
                   tol: float = 1e-6) -> ImputedCrossSection:
    """Low-rank factor imputation by alternating least squares.

    Missing cells start at column means; each pass solves for scores, then
    loadings, then refreshes the missing cells with the reconstruction. The
    observed-cell squared error never increases; iteration stops when its
    relative improvement drops below tol.
    """
    k = int(factors)
    if not (k < cs.n_predictors and k < cs.n_stocks):
        raise DataError(f"factor count {k} must be below both matrix dimensions")
    x, mask = cs.values, cs.mask
    xh = np.where(mask, x, _column_means(cs))
    _, svals, vt = np.linalg.svd(xh, full_matrices=False)
    lam = vt[:k].T * (svals[:k] / np.sqrt(cs.n_stocks))

    trace = []
    prev = None
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        scores = np.linalg.lstsq(lam, xh.T, rcond=None)[0].T
        lam = np.linalg.lstsq(scores, xh, rcond=None)[0].T
        recon = scores @ lam.T
        xh = np.where(mask, x, recon)
        obj = float(np.sum((x[mask] - recon[mask]) ** 2))
        trace.append(obj)
        if prev is not None and prev - obj <= tol * max(prev, np.finfo(float).tiny):
            converged = True
            break
        prev = obj
    info = {"iterations": iterations, "converged": converged,
            "objective_trace": np.asarray(trace)}
    return _finish(cs, xh, _new_provenance(cs), info)


def run_imputer(spec: ImputerSpec, panel: PredictorPanel, month: int,
                predictors: list[str] | None = None,
                tcache: TransformCache | None = None) -> ImputedCrossSection:
    """Transform the month and dispatch to the requested method.

    Identical spec and inputs produce an identical filled matrix.
    """
    predictors = predictors if predictors is not None else panel.predictor_ids
    p = dict(spec.params)
    if tcache is None:
        tcache = TransformCache(panel, mode=p.get("transform", "boxcox"))
    if spec.method == "ar1_em":
        return impute_ar1_em(panel, month, predictors, tcache,
                             window=p.get("window", 60),
                             min_pairs=p.get("min_pairs", 24),
                             tol=p.get("tol", 1e-4),
                             max_iter=p.get("max_iter", 10000))
    cs, params = tcache.cross_section(month, predictors)
    if spec.method == "simple_mean":
        return impute_simple_mean(cs)
    if spec.method == "group_mean":
        return impute_group_mean(cs, p.get("industry", {}),
                                 panel.caps_for_month(month))
    if spec.method == "last_observed":
        return impute_last_observed(panel, cs, params,
                                    lookback=p.get("lookback", 12))
    if spec.method == "mvn_em":
        return impute_mvn_em(cs, tol=p.get("tol", 1e-4),
                             max_iter=p.get("max_iter", 10000))
    if spec.method == "ppca_em":
        return impute_ppca_em(cs, factors=p.get("factors", 60),
                              max_iter=p.get("max_iter", 500),
                              tol=p.get("tol", 1e-6))
    raise DataError(f"unknown imputation method: {spec.method!r}")
