import numpy as np
import pandas as pd
import pytest

from ximpute.panel import CrossSection, build_pattern_index, panel_from_frames


def make_cs(values, month=200001, stock_ids=None, predictor_ids=None):
    """CrossSection from a dense array with NaN marking missing cells."""
    values = np.asarray(values, dtype=float)
    n, j = values.shape
    stock_ids = stock_ids or [f"s{i:03d}" for i in range(n)]
    predictor_ids = predictor_ids or [f"p{k:02d}" for k in range(j)]
    mask = np.isfinite(values)
    return CrossSection(month, stock_ids, predictor_ids, values, mask,
                        build_pattern_index(mask))


def panel_from_matrix(values_by_month, returns=None, caps=None, meta=None):
    """Panel from {month: 2d array}; NaN cells are simply absent."""
    rows = []
    for month, vals in values_by_month.items():
        vals = np.asarray(vals, dtype=float)
        n, j = vals.shape
        for i in range(n):
            for k in range(j):
                if np.isfinite(vals[i, k]):
                    rows.append((f"s{i:03d}", month, f"p{k:02d}", vals[i, k]))
    obs = pd.DataFrame(rows, columns=["stock_id", "yyyymm", "predictor", "value"])
    ret = None
    if returns is not None:
        ret = pd.DataFrame([(s, m, r) for (s, m), r in returns.items()],
                           columns=["stock_id", "yyyymm", "ret"])
    cap = None
    if caps is not None:
        cap = pd.DataFrame([(s, m, c) for (s, m), c in caps.items()],
                           columns=["stock_id", "yyyymm", "cap"])
    return panel_from_frames(obs, ret, cap, meta)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))
