"""Panel ingestion, validation, cross-section slicing, and missingness summaries.

All months are integer yyyymm. A panel is immutable after construction; any
number of readers may slice cross-sections concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DataError, EmptyCrossSectionError

OBS_COLUMNS = ["stock_id", "yyyymm", "predictor", "value"]
RET_COLUMNS = ["stock_id", "yyyymm", "ret", "mktcap"]
META_COLUMNS = ["predictor", "update_months"]

VALID_UPDATE_PERIODS = (1, 3, 12)


def add_months(yyyymm: int, k: int) -> int:
    """Shift a yyyymm month by k calendar months (k may be negative)."""
    y, m = divmod(int(yyyymm), 100)
    idx = y * 12 + (m - 1) + k
    return (idx // 12) * 100 + idx % 12 + 1


def month_diff(a: int, b: int) -> int:
    """Number of calendar months from b to a (a - b)."""
    ya, ma = divmod(int(a), 100)
    yb, mb = divmod(int(b), 100)
    return (ya * 12 + ma) - (yb * 12 + mb)


def month_span(first: int, last: int) -> list[int]:
    """Inclusive list of yyyymm months from first to last."""
    if month_diff(last, first) < 0:
        raise ValueError(f"month range {first}:{last} is reversed")
    return [add_months(first, k) for k in range(month_diff(last, first) + 1)]


def _check_month(ym) -> int:
    ym = int(ym)
    m = ym % 100
    if not (1 <= m <= 12) or ym < 100:
        raise DataError(f"invalid yyyymm month: {ym}")
    return ym


@dataclass(frozen=True)
class CrossSection:
    """One month's stock-by-predictor value matrix with an explicit mask.

    values[i, j] is finite wherever mask[i, j] is True and NaN elsewhere.
    pattern_index groups row indices by identical mask rows, in order of
    first occurrence; groups partition range(n_stocks).
    """

    month: int
    stock_ids: list[str]
    predictor_ids: list[str]
    values: np.ndarray
    mask: np.ndarray
    pattern_index: dict[bytes, list[int]] = field(repr=False)

    @property
    def n_stocks(self) -> int:
        return len(self.stock_ids)

    @property
    def n_predictors(self) -> int:
        return len(self.predictor_ids)

    def with_values(self, values: np.ndarray, mask: np.ndarray | None = None) -> "CrossSection":
        """Copy of this cross-section with replaced values (and optionally mask)."""
        values = np.asarray(values, dtype=float)
        if values.shape != self.values.shape:
            raise DataError("replacement values have wrong shape")
        if mask is None:
            return CrossSection(self.month, self.stock_ids, self.predictor_ids,
                                values, self.mask, self.pattern_index)
        mask = np.asarray(mask, dtype=bool)
        return CrossSection(self.month, self.stock_ids, self.predictor_ids,
                            values, mask, build_pattern_index(mask))


def build_pattern_index(mask: np.ndarray) -> dict[bytes, list[int]]:
    """Group row indices by identical mask rows (first-occurrence order)."""
    index: dict[bytes, list[int]] = {}
    for i, row in enumerate(np.asarray(mask, dtype=bool)):
        index.setdefault(row.tobytes(), []).append(i)
    return index


@dataclass(frozen=True)
class PredictorPanel:
    """Long-format store of predictor observations, returns, and market caps.

    observations: columns stock_id, yyyymm, predictor, value (unique key).
    returns: columns stock_id, yyyymm, ret (unique key).
    market_caps: columns stock_id, yyyymm, cap (unique key, cap > 0).
    predictor_meta: predictor -> data update period in months (1, 3, or 12).
    """

    observations: pd.DataFrame
    returns: pd.DataFrame
    market_caps: pd.DataFrame
    predictor_meta: dict[str, int]
    month_range: tuple[int, int]

    @property
    def predictor_ids(self) -> list[str]:
        return sorted(self.observations["predictor"].unique())

    @property
    def months(self) -> list[int]:
        return sorted(self.observations["yyyymm"].unique())

    def observations_for_month(self, month: int) -> pd.DataFrame:
        return self.observations[self.observations["yyyymm"] == int(month)]

    def returns_for_month(self, month: int) -> dict[str, float]:
        sub = self.returns[self.returns["yyyymm"] == int(month)]
        return dict(zip(sub["stock_id"], sub["ret"]))

    def caps_for_month(self, month: int) -> dict[str, float]:
        sub = self.market_caps[self.market_caps["yyyymm"] == int(month)]
        return dict(zip(sub["stock_id"], sub["cap"]))

    def raw_column(self, month: int, predictor: str) -> pd.Series:
        """Observed raw values for one predictor-month, indexed by stock_id."""
        sub = self.observations
        sel = sub[(sub["yyyymm"] == int(month)) & (sub["predictor"] == predictor)]
        return pd.Series(sel["value"].to_numpy(), index=list(sel["stock_id"]))

    def top_predictors(self, n: int) -> list[str]:
        """The n predictors with the most observations overall (ties by id)."""
        counts = self.observations.groupby("predictor").size()
        order = sorted(counts.index, key=lambda p: (-counts[p], p))
        return order[:n]


def _read_csv_checked(path, columns, rename: dict | None = None) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except Exception as exc:  # pragma: no cover - pandas error text varies
        raise DataError(f"{path}: cannot parse CSV: {exc}") from exc
    if rename:
        df = df.rename(columns=rename)
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing required columns {missing}")
    return df[columns]


def _numeric_column(df: pd.DataFrame, col: str, path, allow_nonfinite=False) -> np.ndarray:
    vals = pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=float)
    raw_na = df[col].isna().to_numpy()
    bad = ~np.isfinite(vals)
    if allow_nonfinite:
        return vals
    if bad.any() or raw_na.any():
        line = int(np.argmax(bad | raw_na)) + 2  # header is line 1
        raise DataError(f"{path}: non-finite or unparsable {col!r} at line {line}")
    return vals


def _check_duplicates(df: pd.DataFrame, keys: list[str], path) -> None:
    dup = df.duplicated(subset=keys)
    if dup.any():
        line = int(np.argmax(dup.to_numpy())) + 2
        raise DataError(f"{path}: duplicate key {keys} at line {line}")


def load_panel(path, returns_path=None, meta_path=None,
               schema: dict | None = None) -> PredictorPanel:
    """Load and validate a long-format predictor panel.

    path: CSV with header stock_id,yyyymm,predictor,value.
    returns_path: optional CSV stock_id,yyyymm,ret,mktcap.
    meta_path: optional CSV predictor,update_months (values in {1,3,12}).
    schema: optional column-name mapping from file columns to canonical names.
    """
    obs = _read_csv_checked(path, OBS_COLUMNS, rename=schema)
    if obs.empty:
        raise DataError(f"{path}: no observations")
    obs = obs.assign(value=_numeric_column(obs, "value", path))
    obs = obs.assign(yyyymm=[_check_month(m) for m in _numeric_column(obs, "yyyymm", path)])
    _check_duplicates(obs, ["stock_id", "yyyymm", "predictor"], path)

    if returns_path is not None:
        ret = _read_csv_checked(returns_path, RET_COLUMNS, rename=schema)
        ret = ret.assign(ret=_numeric_column(ret, "ret", returns_path),
                         cap=_numeric_column(ret, "mktcap", returns_path),
                         yyyymm=[_check_month(m) for m in _numeric_column(ret, "yyyymm", returns_path)])
        _check_duplicates(ret, ["stock_id", "yyyymm"], returns_path)
        if (ret["cap"] <= 0).any():
            line = int(np.argmax((ret["cap"] <= 0).to_numpy())) + 2
            raise DataError(f"{returns_path}: non-positive mktcap at line {line}")
        returns = ret[["stock_id", "yyyymm", "ret"]].reset_index(drop=True)
        caps = ret[["stock_id", "yyyymm", "cap"]].reset_index(drop=True)
    else:
        returns = pd.DataFrame(columns=["stock_id", "yyyymm", "ret"])
        caps = pd.DataFrame(columns=["stock_id", "yyyymm", "cap"])

    meta: dict[str, int] = {}
    if meta_path is not None:
        mdf = _read_csv_checked(meta_path, META_COLUMNS, rename=schema)
        for _, row in mdf.iterrows():
            h = int(float(row["update_months"]))
            if h not in VALID_UPDATE_PERIODS:
                raise DataError(f"{meta_path}: update_months must be one of {VALID_UPDATE_PERIODS}, got {h}")
            meta[str(row["predictor"])] = h

    months = list(obs["yyyymm"])
    if len(returns):
        months += list(returns["yyyymm"])
    rng = (min(months), max(months))
    return PredictorPanel(obs.reset_index(drop=True), returns, caps, meta, rng)


def panel_from_frames(observations: pd.DataFrame, returns: pd.DataFrame | None = None,
                      market_caps: pd.DataFrame | None = None,
                      predictor_meta: dict[str, int] | None = None) -> PredictorPanel:
    """Build a validated panel from in-memory frames (same invariants as load_panel)."""
    obs = observations[OBS_COLUMNS[:4]].copy()
    obs["value"] = obs["value"].astype(float)
    obs["yyyymm"] = obs["yyyymm"].astype(int)
    if not np.isfinite(obs["value"].to_numpy()).all():
        raise DataError("non-finite predictor value")
    if obs.duplicated(subset=["stock_id", "yyyymm", "predictor"]).any():
        raise DataError("duplicate (stock_id, yyyymm, predictor) key")
    returns = returns if returns is not None else pd.DataFrame(columns=["stock_id", "yyyymm", "ret"])
    caps = market_caps if market_caps is not None else pd.DataFrame(columns=["stock_id", "yyyymm", "cap"])
    if len(returns) and returns.duplicated(subset=["stock_id", "yyyymm"]).any():
        raise DataError("duplicate (stock_id, yyyymm) return key")
    if len(caps) and caps.duplicated(subset=["stock_id", "yyyymm"]).any():
        raise DataError("duplicate (stock_id, yyyymm) cap key")
    months = list(obs["yyyymm"]) + list(returns["yyyymm"] if len(returns) else [])
    rng = (int(min(months)), int(max(months)))
    return PredictorPanel(obs.reset_index(drop=True), returns.reset_index(drop=True),
                          caps.reset_index(drop=True), dict(predictor_meta or {}), rng)


def cross_section(panel: PredictorPanel, month: int, predictors: list[str]) -> CrossSection:
    """Slice one month into an N x J matrix with observed/missing mask.

    A stock enters iff it has at least one observed predictor among those
    requested that month. Rows are ordered by stock_id, columns follow the
    requested predictor order.
    """
    month = _check_month(month)
    if not predictors:
        raise DataError("predictor list is empty")
    lo, hi = panel.month_range
    if not (lo <= month <= hi):
        raise DataError(f"month {month} outside panel range {lo}:{hi}")

    sub = panel.observations_for_month(month)
    sub = sub[sub["predictor"].isin(predictors)]
    if sub.empty:
        raise EmptyCrossSectionError(f"no observations for month {month}")

    stock_ids = sorted(sub["stock_id"].unique())
    n, j = len(stock_ids), len(predictors)
    values = np.full((n, j), np.nan)
    srow = {s: i for i, s in enumerate(stock_ids)}
    pcol = {p: k for k, p in enumerate(predictors)}
    values[[srow[s] for s in sub["stock_id"]], [pcol[p] for p in sub["predictor"]]] = \
        sub["value"].to_numpy(dtype=float)
    mask = np.isfinite(values)
    return CrossSection(month, stock_ids, list(predictors), values, mask,
                        build_pattern_index(mask))


def observed_share_percentiles(panel: PredictorPanel, months: list[int],
                               percentiles: list[float]) -> pd.DataFrame:
    """Order statistics of per-predictor observed shares, by month.

    Share of predictor p in month m = 100 * (#stocks observing p) /
    (#stocks with at least one observed predictor in m). Returned frame is
    indexed by percentile with one column per month.
    """
    if not months:
        raise DataError("months list is empty")
    out = {}
    for month in months:
        sub = panel.observations_for_month(_check_month(month))
        if sub.empty:
            raise EmptyCrossSectionError(f"no observations for month {month}")
        n_stocks = sub["stock_id"].nunique()
        shares = sub.groupby("predictor")["stock_id"].nunique() / n_stocks * 100.0
        out[month] = [float(np.percentile(shares.to_numpy(), q)) for q in percentiles]
    return pd.DataFrame(out, index=pd.Index(percentiles, name="percentile"))


def combine_j_summary(panel: PredictorPanel, month: int, j: int) -> tuple[float, float]:
    """Missingness when combining the j most-observed predictors of a month.

    Returns (pct_cells_observed, pct_stocks_complete), both over the stocks
    having at least one of the selected predictors. Ties in the observation
    ranking break by predictor_id.
    """
    sub = panel.observations_for_month(_check_month(month))
    counts = sub.groupby("predictor")["stock_id"].nunique()
    if j > len(counts):
        raise DataError(f"J={j} exceeds the {len(counts)} predictors observed in {month}")
    chosen = sorted(counts.index, key=lambda p: (-counts[p], p))[:j]
    sel = sub[sub["predictor"].isin(chosen)]
    n_stocks = sel["stock_id"].nunique()
    n_cells = len(sel)
    per_stock = sel.groupby("stock_id")["predictor"].nunique()
    n_complete = int((per_stock == j).sum())
    return (100.0 * n_cells / (j * n_stocks), 100.0 * n_complete / n_stocks)


def missingness_map(cs: CrossSection) -> pd.DataFrame:
    """Predictor-by-stock 0/1 grid (1 = observed).

    Rows are predictors ordered by observed share descending (ties by id);
    columns are the cross-section's stocks.
    """
    if cs.n_stocks == 0:
        raise DataError("empty cross-section")
    shares = cs.mask.mean(axis=0)
    order = sorted(range(cs.n_predictors), key=lambda k: (-shares[k], cs.predictor_ids[k]))
    grid = cs.mask.T[order].astype(int)
    return pd.DataFrame(grid, index=[cs.predictor_ids[k] for k in order],
                        columns=cs.stock_ids)
