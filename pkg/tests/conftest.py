from pathlib import Path

import numpy as np
import pytest

from vcrb_lab.market_data import Batch, TickArray

FIXTURES = Path(__file__).parent / "fixtures"


def make_batch(prices, bid_volume=None, ask_volume=None, label="test", start_ts=0, step_ms=1000):
    """Batch from a price path; default one bid and one ask trade of size 1 per tick."""
    prices = np.asarray(prices, dtype=np.int64)
    n = len(prices)
    bv = np.ones(n, dtype=np.int64) if bid_volume is None else np.asarray(bid_volume, dtype=np.int64)
    av = np.ones(n, dtype=np.int64) if ask_volume is None else np.asarray(ask_volume, dtype=np.int64)
    bt = np.minimum(bv, 1)
    at = np.minimum(av, 1)
    ts = start_ts + np.arange(n, dtype=np.int64) * step_ms
    ticks = TickArray(ts, ts + step_ms - 1, prices, bv, av, bt, at)
    return Batch(label, ticks, int(start_ts), int(start_ts + n * step_ms))


@pytest.fixture
def fixtures_dir():
    return FIXTURES
