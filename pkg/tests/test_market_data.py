import gzip
from collections import Counter

import numpy as np
import pytest

from vcrb_lab.market_data import (InstrumentSpec, SyntheticConfig, TickArray, TickFormatError, TickRecord,
                                  generate_synthetic, load_ticks, split_batches, write_ticks)

ES = InstrumentSpec("ES", 0.25)

HEADER = "start_ts_ms,end_ts_ms,price,bid_volume,ask_volume,bid_trades,ask_trades\n"


def write(tmp_path, body, name="t.csv", header=True):
    p = tmp_path / name
    p.write_text((HEADER if header else "") + body)
    return p


def test_load_converts_prices_to_tick_index(tmp_path):
    p = write(tmp_path, "0,10,4000.25,3,2,1,1\n10,20,4000.50,0,5,0,2\n")
    ticks = load_ticks(p, ES)
    assert ticks.price_idx.tolist() == [16001, 16002]
    assert ticks[1] == TickRecord(10, 20, 16002, 0, 5, 0, 2)


def test_load_without_header_and_gzip(tmp_path):
    p = tmp_path / "t.csv.gz"
    with gzip.open(p, "wt") as fh:
        fh.write("0,10,1.5,1,1,1,1\n")
    assert load_ticks(p, InstrumentSpec("X", 0.5)).price_idx.tolist() == [3]


@pytest.mark.parametrize("body, fragment", [
    ("0,10,4000.1,1,1,1,1\n", "not a multiple"),
    ("0,10,4000.25,1,1,1\n", "expected 7 fields"),
    ("10,5,4000.25,1,1,1,1\n", "precedes"),
    ("0,10,4000.25,1,1,0,1\n", "consistency"),
    ("0,10,4000.25,1,1,2,1\n", "consistency"),
    ("0,10,abc,1,1,1,1\n", "line 2"),
])
def test_load_rejects_bad_rows(tmp_path, body, fragment):
    with pytest.raises(TickFormatError, match=fragment):
        load_ticks(write(tmp_path, body), ES)


def test_unsorted_timestamps(tmp_path):
    p = write(tmp_path, "20,30,1,1,1,1,1\n0,10,2,1,1,1,1\n")
    with pytest.raises(TickFormatError, match="monotonic"):
        load_ticks(p, InstrumentSpec("X", 1.0))
    ticks = load_ticks(p, InstrumentSpec("X", 1.0), on_unsorted="sort")
    assert ticks.start_ts_ms.tolist() == [0, 20]


def test_write_load_roundtrip(tmp_path):
    ticks = generate_synthetic(3, SyntheticConfig(n_ticks=500))
    spec = InstrumentSpec("B6", 0.0001)
    write_ticks(tmp_path / "x.csv", ticks, spec)
    assert load_ticks(tmp_path / "x.csv", spec) == ticks


def test_tick_array_is_immutable():
    ticks = generate_synthetic(0, SyntheticConfig(n_ticks=10))
    with pytest.raises(AttributeError):
        ticks.price_idx = None
    with pytest.raises(ValueError):
        ticks.price_idx[0] = 1


def test_invalid_instrument():
    with pytest.raises(ValueError):
        InstrumentSpec("X", 0.0)


def _ts(y, m, d):
    import datetime as dt
    return int(dt.datetime(y, m, d, tzinfo=dt.timezone.utc).timestamp() * 1000)


def test_split_batches_calendar_labels_and_empty_batches():
    ts = np.array([_ts(2017, 3, 5), _ts(2017, 5, 31), _ts(2017, 6, 1), _ts(2018, 1, 2)])
    ticks = TickArray(ts, ts, [1, 2, 3, 4], [1] * 4, [1] * 4, [1] * 4, [1] * 4)
    batches = split_batches(ticks)
    assert [b.label for b in batches] == ["3/17 to 6/17", "6/17 to 9/17", "9/17 to 12/17", "12/17 to 3/18"]
    assert [len(b) for b in batches] == [2, 1, 0, 1]
    assert sum(len(b) for b in batches) == len(ticks)


def test_generator_is_deterministic():
    cfg = SyntheticConfig(n_ticks=3000)
    assert generate_synthetic(7, cfg) == generate_synthetic(7, cfg)
    assert not generate_synthetic(7, cfg) == generate_synthetic(8, cfg)


def test_generator_outcome_mix_is_stratified():
    cfg = SyntheticConfig(n_ticks=60_000, signal_delta=0.2)
    _, episodes = generate_synthetic(1, cfg, return_episodes=True)
    for dominant, p_rev in ((True, 0.6), (False, 0.4)):
        group = [e for e in episodes if e.bid_dominant is dominant]
        counts = Counter(e.outcome for e in group)
        # complete blocks of 20 hold the configured mix exactly
        assert abs(counts["reversal"] / len(group) - p_rev) <= 20 / len(group)
        assert abs(counts["excluded"] / len(group) - 0.05) <= 20 / len(group)


def test_generator_episode_touches_target():
    ticks, episodes = generate_synthetic(2, SyntheticConfig(n_ticks=5000), return_episodes=True)
    for e in episodes:
        assert ticks.price_idx[e.touch_index] == e.target_price_idx
        assert ticks.price_idx[e.touch_index - 1] == e.target_price_idx + e.approach_side


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(signal_delta=1.5).validate()
    with pytest.raises(ValueError):
        SyntheticConfig(step_probs=(0.5, 0.6, 0.0)).validate()
