import numpy as np
import pandas as pd
import pytest

from cpmoe.schema import FEATURE_COLUMNS, TARGET_COLUMNS


def make_frame(n: int, seed: int = 0, start: str = "2023-01-01") -> pd.DataFrame:
    """Random but well-formed hourly frame with all 31+6 columns."""
    rng = np.random.default_rng(seed)
    data = {}
    for i, c in enumerate(FEATURE_COLUMNS):
        base = 10.0 * (i + 1)
        data[c] = base + rng.normal(0, 1 + 0.1 * i, n)
    for j, c in enumerate(TARGET_COLUMNS):
        data[c] = 5.0 * (j + 1) + np.abs(rng.normal(0, 1, n))
    df = pd.DataFrame(data)
    df.index = pd.date_range(start, periods=n, freq="1h")
    df.index.name = "timestamp"
    return df


@pytest.fixture
def frame_200():
    return make_frame(200)
