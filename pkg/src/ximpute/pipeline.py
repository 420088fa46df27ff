"""Month-level orchestration: fit per predictor-month transforms once and
serve standardized cross-sections to the imputers and backtests."""

from __future__ import annotations

import numpy as np

from . import transform as tf
from .errors import DataError
from .panel import CrossSection, PredictorPanel, cross_section


class TransformCache:
    """Lazily fits and caches the per (month, predictor) transform.

    mode 'boxcox' runs the full winsorize/positivize/power-ML pipeline;
    mode 'standardize' only winsorizes and standardizes (lambda=1 path),
    which is much faster when marginal normalization is not under study.
    """

    def __init__(self, panel: PredictorPanel, mode: str = "boxcox"):
        if mode not in ("boxcox", "standardize"):
            raise DataError(f"unknown transform mode: {mode}")
        self.panel = panel
        self.mode = mode
        self._cols: dict[tuple[int, str], tuple[tf.TransformParams, dict]] = {}

    def column(self, month: int, predictor: str) -> tuple[tf.TransformParams, dict]:
        """(params, {stock_id: transformed value}) for one predictor-month."""
        key = (int(month), predictor)
        if key not in self._cols:
            raw = self.panel.raw_column(month, predictor)
            if raw.empty:
                raise DataError(f"predictor {predictor!r} has no observations in {month}")
            values = raw.to_numpy(dtype=float)
            if self.mode == "standardize":
                params, z = _standardize_only(values, predictor, int(month))
            else:
                params, z = tf.fit_transform(values, predictor, int(month))
            self._cols[key] = (params, dict(zip(raw.index, z)))
        return self._cols[key]

    def cross_section(self, month: int, predictors: list[str]
                      ) -> tuple[CrossSection, dict[str, tf.TransformParams]]:
        """Standardized cross-section plus the fitted params per predictor."""
        cs = cross_section(self.panel, month, predictors)
        values = np.full_like(cs.values, np.nan)
        params: dict[str, tf.TransformParams] = {}
        for k, pred in enumerate(cs.predictor_ids):
            p, by_stock = self.column(month, pred)
            params[pred] = p
            col = np.array([by_stock.get(s, np.nan) for s in cs.stock_ids])
            values[:, k] = np.where(cs.mask[:, k], col, np.nan)
        return cs.with_values(values), params


def _standardize_only(values: np.ndarray, predictor: str, month: int):
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 2 or np.min(values) == np.max(values):
        const = float(values[0]) if n else 0.0
        params = tf.TransformParams(predictor, month, const, const, 0.0, 1.0,
                                    const - 1.0, 1.0, n, degenerate=True)
        return params, np.zeros(n)
    if n < tf.MIN_FIT_OBS:
        lo, hi = -np.inf, np.inf
        w = values
    else:
        lo, hi = np.percentile(values, tf.WINSOR_TAILS, method="weibull")
        w = np.clip(values, lo, hi)
    z = w - 1.0  # lambda=1, gamma=0 core
    mean, sd = float(np.mean(z)), float(np.std(z))
    if sd <= 0:
        params = tf.TransformParams(predictor, month, lo, hi, 0.0, 1.0,
                                    mean, 1.0, n, degenerate=True)
        return params, np.zeros(n)
    params = tf.TransformParams(predictor, month, float(lo), float(hi),
                                0.0, 1.0, mean, sd, n)
    return params, (z - mean) / sd
