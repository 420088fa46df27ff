"""Rolling out-of-sample forecasting and long-short portfolio construction.

Forecasters: single-predictor sorts, pooled OLS, principal-components
regression, and return-scaled PCR. Forecasts for month t only touch data
dated t-1 or earlier; an audit trail records the data slice examined for
every target month.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateSortError, NumericalError
from .imputers import ImputerSpec, run_imputer
from .panel import PredictorPanel, add_months, month_span
from .pipeline import TransformCache
from .spectral import pca_spectrum, pooled_covariance, scaled_predictors

FORECASTERS = ("single_predictor", "ols", "pcr", "spcr")
DEFAULT_TUNING_GRID = (10, 30, 50, 70, 90)


@dataclass(frozen=True)
class TuningSpec:
    grid: tuple = DEFAULT_TUNING_GRID
    cadence_month: int = 6     # calendar month of the annual tuning date
    max_validation: int = 144  # validation capped at the past 12 years


@dataclass(frozen=True)
class StrategySpec:
    forecaster: str
    imputer: ImputerSpec = ImputerSpec("simple_mean")
    k: int = 10
    window: int = 120
    weighting: str = "equal"
    leg_size: int = 500
    predictor: str | None = None   # single-predictor mode
    handling: str = "imputed"      # single-predictor mode: imputed | drop_missing
    min_obs: int = 1000            # single-predictor observation filter
    tuning: TuningSpec | None = None

    def __post_init__(self):
        if self.forecaster not in FORECASTERS:
            raise DataError(f"unknown forecaster: {self.forecaster!r}")
        if self.weighting not in ("equal", "value"):
            raise DataError(f"unknown weighting: {self.weighting!r}")
        if self.k < 1:
            raise DataError("K must be at least 1")
        if self.window < 24:
            raise DataError("window must be at least 24 months")


@dataclass
class PortfolioSeries:
    """Monthly long-short returns plus run metadata."""

    months: list[int]
    returns: np.ndarray
    n_long: np.ndarray
    n_short: np.ndarray
    weighting: str
    skipped: list[tuple[int, str]] = field(default_factory=list)
    tuning_log: list[dict] = field(default_factory=list)
    audit: dict[int, dict] = field(default_factory=dict)

    @property
    def annualized_mean(self) -> float:
        """12 x monthly mean, in percent."""
        return 12.0 * float(np.mean(self.returns)) * 100.0

    @property
    def annualized_sharpe(self) -> float:
        sd = float(np.std(self.returns, ddof=1))
        return float(np.mean(self.returns)) / sd * np.sqrt(12.0)


@dataclass(frozen=True)
class MonthData:
    """Imputed predictors for one formation month, aligned with the
    following month's returns and the formation month's caps."""

    month: int
    stock_ids: list[str]
    x: np.ndarray
    ret_next: np.ndarray
    caps: np.ndarray


class _Store:
    """Caches imputed month matrices and their digests for one strategy."""

    def __init__(self, panel: PredictorPanel, imputer: ImputerSpec,
                 predictors: list[str], tcache: TransformCache | None):
        self.panel = panel
        self.imputer = imputer
        self.predictors = predictors
        self.tcache = tcache or TransformCache(
            panel, mode=dict(imputer.params).get("transform", "boxcox"))
        self._months: dict[int, MonthData] = {}
        self._digests: dict[int, str] = {}

    def get(self, month: int) -> MonthData:
        if month not in self._months:
            imp = run_imputer(self.imputer, self.panel, month,
                              self.predictors, self.tcache)
            rets = self.panel.returns_for_month(add_months(month, 1))
            caps = self.panel.caps_for_month(month)
            ids = imp.cs.stock_ids
            self._months[month] = MonthData(
                month, ids, imp.filled,
                np.array([rets.get(s, np.nan) for s in ids]),
                np.array([caps.get(s, np.nan) for s in ids]))
        return self._months[month]

    def digest(self, month: int) -> str:
        if month not in self._digests:
            md = self.get(month)
            h = hashlib.sha256()
            h.update(str(month).encode())
            h.update(md.x.tobytes())
            h.update(md.ret_next.tobytes())
            self._digests[month] = h.hexdigest()
        return self._digests[month]


def _stack_pairs(window: list[MonthData], last_return_month: int):
    """Pooled (predictor, next-month-return) pairs whose return month does
    not exceed last_return_month."""
    xs, rs = [], []
    for md in window:
        if add_months(md.month, 1) > last_return_month:
            continue
        keep = np.isfinite(md.ret_next)
        if keep.any():
            xs.append(md.x[keep])
            rs.append(md.ret_next[keep])
    if not xs:
        raise DataError("no predictor/return pairs in the window")
    return np.vstack(xs), np.concatenate(rs)


def _ols_with_intercept(design: np.ndarray, y: np.ndarray,
                        ridge: float = 0.0) -> np.ndarray:
    d = np.column_stack([np.ones(len(design)), design])
    if ridge:
        gram = d.T @ d + ridge * np.eye(d.shape[1])
        coef = np.linalg.solve(gram, d.T @ y)
    else:
        coef = np.linalg.lstsq(d, y, rcond=None)[0]
    if not np.isfinite(coef).all():
        raise NumericalError("regression produced non-finite coefficients")
    return coef


def _pc_basis(window: list[MonthData], k: int) -> tuple[np.ndarray, np.ndarray]:
    sigma = pooled_covariance([md.x for md in window])
    spec = pca_spectrum(sigma)
    if k > sigma.shape[0] or spec.eigenvalues[k - 1] <= 1e-12 * max(spec.eigenvalues[0], 1e-300):
        raise NumericalError(f"window has fewer than K={k} effective dimensions")
    mean = sum(md.x.sum(axis=0) for md in window) / sum(len(md.stock_ids) for md in window)
    return mean, spec.eigenvectors[:, :k]


def pcr_forecast(window: list[MonthData], k: int,
                 target: MonthData) -> dict[str, float]:
    """Regress next-month returns on lagged PC scores pooled over the
    window; forecast the month after target.month from target's scores."""
    mean, basis = _pc_basis(window, k)
    xs, rs = _stack_pairs(window, last_return_month=target.month)
    coef = _ols_with_intercept((xs - mean) @ basis, rs)
    scores = (target.x - mean) @ basis
    fitted = coef[0] + scores @ coef[1:]
    return dict(zip(target.stock_ids, fitted))


def spcr_forecast(window: list[MonthData], k: int,
                  target: MonthData) -> dict[str, float]:
    """PCR on predictors scaled by their pooled univariate return slopes."""
    usable = [md for md in window if add_months(md.month, 1) <= target.month]
    scaled, gamma = scaled_predictors([md.x for md in usable],
                                      [md.ret_next for md in usable])
    if not np.any(gamma):
        raise NumericalError("all scaling slopes are zero")
    scaled_window = [MonthData(md.month, md.stock_ids, md.x * gamma,
                               md.ret_next, md.caps) for md in window]
    scaled_target = MonthData(target.month, target.stock_ids, target.x * gamma,
                              target.ret_next, target.caps)
    return pcr_forecast(scaled_window, k, scaled_target)


def ols_forecast(window: list[MonthData], target: MonthData) -> dict[str, float]:
    """Pooled OLS of next-month returns on lagged imputed predictors."""
    xs, rs = _stack_pairs(window, last_return_month=target.month)
    coef = _ols_with_intercept(xs, rs, ridge=1e-10)
    fitted = coef[0] + target.x @ coef[1:]
    return dict(zip(target.stock_ids, fitted))


def decile_portfolio(forecasts: dict[str, float], returns: dict[str, float],
                     caps: dict[str, float], weighting: str = "equal"
                     ) -> tuple[float, int, int]:
    """Long the top forecast decile, short the bottom one, for one month.

    Breakpoints use forecast ranks with ties broken by stock_id. Value
    weighting uses the supplied (formation-month) caps, normalized within
    each leg. Returns (long_short_return, n_long, n_short).
    """
    stocks = [s for s, f in forecasts.items()
              if np.isfinite(f) and np.isfinite(returns.get(s, np.nan))]
    if weighting == "value":
        stocks = [s for s in stocks if np.isfinite(caps.get(s, np.nan))
                  and caps[s] > 0]
    if len(stocks) < 10:
        raise DataError(f"only {len(stocks)} stocks with forecasts and returns")
    fvals = np.array([forecasts[s] for s in stocks])
    if fvals.max() == fvals.min():
        raise DegenerateSortError("all forecasts are equal")
    order = sorted(stocks, key=lambda s: (forecasts[s], s))
    n = len(order)
    decile = np.arange(n) * 10 // n
    short = [order[i] for i in np.flatnonzero(decile == 0)]
    long = [order[i] for i in np.flatnonzero(decile == 9)]

    def leg(names: list[str]) -> float:
        r = np.array([returns[s] for s in names])
        if weighting == "equal":
            return float(r.mean())
        w = np.array([caps[s] for s in names])
        return float(np.sum(w * r) / np.sum(w))

    return leg(long) - leg(short), len(long), len(short)


def single_predictor_strategy(panel: PredictorPanel, predictor: str,
                              handling: str = "imputed", leg_size: int = 500,
                              weighting: str = "equal", min_obs: int = 1000,
                              imputer: ImputerSpec | None = None,
                              predictors: list[str] | None = None,
                              tcache: TransformCache | None = None,
                              months: list[int] | None = None) -> PortfolioSeries:
    """Long the leg_size strongest and short the leg_size weakest stocks by
    one predictor each month.

    handling 'imputed' sorts on the imputed cross-section (all predictors
    inform the fill); 'drop_missing' sorts on observed values only. Months
    with fewer than min_obs observations of the predictor are skipped.
    """
    if handling not in ("imputed", "drop_missing"):
        raise DataError(f"unknown handling: {handling!r}")
    predictors = predictors if predictors is not None else panel.predictor_ids
    if predictor not in predictors:
        raise DataError(f"predictor {predictor!r} not in the panel")
    imputer = imputer or ImputerSpec("mvn_em")
    tcache = tcache or TransformCache(panel,
                                      mode=dict(imputer.params).get("transform", "boxcox"))
    formation = months if months is not None else panel.months
    months, rets, n_long, n_short, skipped = [], [], [], [], []
    for m in formation:
        ret_month = add_months(m, 1)
        returns = panel.returns_for_month(ret_month)
        if not returns:
            continue
        try:
            if handling == "imputed":
                imp = run_imputer(imputer, panel, m, predictors, tcache)
                col = imp.cs.predictor_ids.index(predictor)
                if int(imp.cs.mask[:, col].sum()) < min_obs:
                    skipped.append((ret_month, "observation filter"))
                    continue
                signal = dict(zip(imp.cs.stock_ids, imp.filled[:, col]))
            else:
                cs, _ = tcache.cross_section(m, [predictor])
                if int(cs.mask[:, 0].sum()) < min_obs:
                    skipped.append((ret_month, "observation filter"))
                    continue
                obs = cs.mask[:, 0]
                signal = {s: v for s, v, ok in
                          zip(cs.stock_ids, cs.values[:, 0], obs) if ok}
        except DataError as exc:
            skipped.append((ret_month, str(exc)))
            continue
        caps = panel.caps_for_month(m)
        cands = [s for s in signal if np.isfinite(returns.get(s, np.nan))]
        if weighting == "value":
            cands = [s for s in cands if caps.get(s, 0) > 0]
        if len(cands) < 2 * leg_size:
            skipped.append((ret_month, "too few stocks for the legs"))
            continue
        order = sorted(cands, key=lambda s: (signal[s], s))
        short, long = order[:leg_size], order[-leg_size:]

        def leg(names):
            r = np.array([returns[s] for s in names])
            if weighting == "equal":
                return float(r.mean())
            w = np.array([caps[s] for s in names])
            return float(np.sum(w * r) / np.sum(w))

        months.append(ret_month)
        rets.append(leg(long) - leg(short))
        n_long.append(leg_size)
        n_short.append(leg_size)
    if not months:
        raise DataError("no qualifying months")
    return PortfolioSeries(months, np.array(rets), np.array(n_long),
                           np.array(n_short), weighting, skipped)


def _forecast(spec: StrategySpec, window: list[MonthData], target: MonthData,
              k: int | None = None) -> dict[str, float]:
    k = k if k is not None else spec.k
    if spec.forecaster == "pcr":
        return pcr_forecast(window, k, target)
    if spec.forecaster == "spcr":
        return spcr_forecast(window, k, target)
    return ols_forecast(window, target)


def _validation_rmse(spec: StrategySpec, history: list[MonthData], k: int,
                     n_val: int) -> float:
    train, val = history[:-n_val], history[-n_val:]
    sq, cnt = 0.0, 0
    for md in val:
        keep = np.isfinite(md.ret_next)
        if not keep.any():
            continue
        fc = _forecast(spec, train, md, k)
        pred = np.array([fc[s] for s, ok in zip(md.stock_ids, keep) if ok])
        sq += float(np.sum((pred - md.ret_next[keep]) ** 2))
        cnt += int(keep.sum())
    if cnt == 0:
        raise DataError("validation sample has no returns")
    return np.sqrt(sq / cnt)


def rolling_run(spec: StrategySpec, panel: PredictorPanel,
                oos_range: tuple[int, int], predictors: list[str] | None = None,
                tcache: TransformCache | None = None) -> PortfolioSeries:
    """Monthly long-short deciles over oos_range from rolling forecasts.

    Fixed-K mode refits every month on the trailing `window` months. Tuning
    mode refits annually: at each tuning date the available history splits
    into training and validation (validation is the shorter of the latter
    half and the last 12 years), the grid K with the smallest validation
    RMSE is refitted on the full history and used for the next 12 months.
    """
    if spec.forecaster == "single_predictor":
        if not spec.predictor:
            raise DataError("single_predictor mode needs spec.predictor")
        formation = [add_months(t, -1) for t in month_span(*map(int, oos_range))]
        return single_predictor_strategy(panel, spec.predictor, spec.handling,
                                         spec.leg_size, spec.weighting,
                                         spec.min_obs, spec.imputer,
                                         predictors, tcache, months=formation)
    predictors = predictors if predictors is not None else panel.predictor_ids
    store = _Store(panel, spec.imputer, predictors, tcache)
    first, last = int(oos_range[0]), int(oos_range[1])
    months, rets, n_long, n_short = [], [], [], []
    skipped, tuning_log, audit = [], [], {}

    def window_digest(fmts: list[int], target_fmt: int) -> str:
        h = hashlib.sha256()
        for m in fmts + [target_fmt]:
            h.update(store.digest(m).encode())
        return h.hexdigest()

    def run_month(t: int, forecasts: dict[str, float]):
        returns = panel.returns_for_month(t)
        fmt = store.get(add_months(t, -1))
        caps = dict(zip(fmt.stock_ids, fmt.caps))
        try:
            ls, nl, ns = decile_portfolio(forecasts, returns, caps, spec.weighting)
        except (DataError, DegenerateSortError) as exc:
            skipped.append((t, str(exc)))
            return
        months.append(t)
        rets.append(ls)
        n_long.append(nl)
        n_short.append(ns)

    if spec.tuning is None:
        for t in month_span(first, last):
            fmts = [add_months(t, -d) for d in range(spec.window, 0, -1)]
            window = [store.get(m) for m in fmts]
            target = window[-1]  # formation month t-1
            try:
                forecasts = _forecast(spec, window, target)
            except (DataError, NumericalError) as exc:
                skipped.append((t, str(exc)))
                continue
            audit[t] = {"max_month": max(fmts + [add_months(m, 1) for m in fmts[:-1]]),
                        "digest": window_digest(fmts, target.month)}
            run_month(t, forecasts)
    else:
        cadence = spec.tuning.cadence_month
        hist_start = panel.month_range[0]
        tune_dates = sorted({m for m in month_span(add_months(first, -12), last)
                             if m % 100 == cadence})
        for tau in tune_dates:
            targets = [m for m in month_span(add_months(tau, 1), add_months(tau, 12))
                       if first <= m <= last]
            if not targets:
                continue
            hist_fmts = month_span(hist_start, add_months(tau, -1))
            history = [store.get(m) for m in hist_fmts]
            n_val = min(spec.tuning.max_validation, len(history) // 2)
            if n_val < 1:
                raise DataError(f"not enough history at tuning date {tau}")
            rmse = {}
            for k in spec.tuning.grid:
                try:
                    rmse[k] = _validation_rmse(spec, history, k, n_val)
                except (DataError, NumericalError):
                    rmse[k] = np.inf
            k_star = min(spec.tuning.grid, key=lambda k: (rmse[k], k))
            tuning_log.append({"date": tau, "selected": k_star,
                               "rmse": {k: float(v) for k, v in rmse.items()}})
            for t in targets:
                target = store.get(add_months(t, -1))
                try:
                    forecasts = _forecast(spec, history, target, k_star)
                except (DataError, NumericalError) as exc:
                    skipped.append((t, str(exc)))
                    continue
                audit[t] = {"max_month": max(tau, target.month),
                            "digest": window_digest(hist_fmts, target.month)}
                run_month(t, forecasts)
    if not months:
        raise DataError("no months produced portfolios")
    return PortfolioSeries(months, np.array(rets), np.array(n_long),
                           np.array(n_short), spec.weighting, skipped,
                           tuning_log, audit)
