import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vcrb_lab.market_data import SyntheticConfig, generate_synthetic, split_batches
from vcrb_lab.patterns import (PatternKind, Side, VolumeProfile, completion_indices, extract_price_levels,
                               extract_vcrb, read_events, write_events)

from conftest import make_batch


def naive_vcrb(prices, volume, range_levels):
    """Tick-by-tick buffer automaton with a direct re-scan of every completed window."""
    span = range_levels - 1
    open_buffers = {}  # price -> [start, lo, hi]
    done = []
    for i, p in enumerate(prices):
        if p not in open_buffers:
            open_buffers[p] = [i, p, p]
        for key in list(open_buffers):
            buf = open_buffers[key]
            buf[1], buf[2] = min(buf[1], p), max(buf[2], p)
            if buf[2] - buf[1] >= span:
                del open_buffers[key]
                if buf[2] - buf[1] == span:
                    done.append((i, buf[0]))
    events = []
    for end, start in sorted(done):
        lo = min(prices[start:end + 1])
        totals = {}
        for k in range(start, end + 1):
            totals[prices[k]] = totals.get(prices[k], 0) + volume[k]
        centre = lo + span // 2
        peak = totals.get(centre, 0)
        if peak > 0 and all(v < peak for q, v in totals.items() if q != centre):
            events.append((start, end, centre))
    return events


def random_stream(rng, n):
    steps = rng.choice([-2, -1, 0, 1, 2], size=n, p=[0.05, 0.4, 0.1, 0.4, 0.05])
    prices = 100 + np.cumsum(steps)
    bid = rng.integers(0, 6, size=n)
    ask = rng.integers(0, 6, size=n)
    return prices, bid, ask


@pytest.mark.parametrize("range_levels", [3, 5, 7, 9, 11])
def test_extract_matches_naive_automaton(range_levels):
    rng = np.random.default_rng(range_levels)
    for _ in range(10):
        prices, bid, ask = random_stream(rng, int(rng.integers(50, 600)))
        batch = make_batch(prices, bid, ask)
        got = [(e.first_tick_index, e.formation_tick_index, e.target_price_idx)
               for e in extract_vcrb(batch, range_levels)]
        assert got == naive_vcrb(prices.tolist(), (bid + ask).tolist(), range_levels)


def test_profiles_conserve_volume():
    rng = np.random.default_rng(0)
    prices, bid, ask = random_stream(rng, 800)
    batch = make_batch(prices, bid, ask)
    for e in extract_vcrb(batch, 7):
        sl = slice(e.first_tick_index, e.formation_tick_index + 1)
        assert e.profile.total_volume.sum() == (bid[sl] + ask[sl]).sum()
        assert e.profile.bid_trades.sum() == batch.ticks.bid_trades[sl].sum()
        assert e.profile.n_levels == 7
        assert np.argmax(e.profile.total_volume) == 3


def test_single_bar_by_hand():
    # buffer opened at 100 spans 100..104 and peaks at 102
    prices = [100, 101, 102, 102, 102, 103, 104]
    batch = make_batch(prices)
    events = extract_vcrb(batch, 5)
    assert len(events) == 1
    e = events[0]
    assert (e.first_tick_index, e.formation_tick_index, e.target_price_idx) == (0, 6, 102)
    assert e.side is Side.TARGET_BELOW
    assert e.profile.n_ticks.tolist() == [1, 1, 3, 1, 1]


def test_gapped_buffer_is_dropped():
    # the jump from 102 to 106 overshoots the 5-level span
    assert extract_vcrb(make_batch([100, 101, 102, 102, 102, 106]), 5) == []


def test_flat_profile_gives_no_event():
    assert extract_vcrb(make_batch([100, 101, 102, 103, 104]), 5) == []


@pytest.mark.parametrize("bad", [4, 1, 0])
def test_range_must_be_odd(bad):
    with pytest.raises(ValueError):
        extract_vcrb(make_batch([1, 2, 3]), bad)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=1, max_size=60), st.integers(0, 6))
def test_completion_indices_brute_force(prices, span):
    p = np.array(prices)
    got = completion_indices(p, span)
    for i in range(len(p)):
        expect = -1
        for j in range(i, len(p)):
            if p[i:j + 1].max() - p[i:j + 1].min() >= span:
                expect = j
                break
        assert got[i] == expect


def test_generator_yields_bars_for_all_ranges():
    batch = split_batches(generate_synthetic(0, SyntheticConfig(n_ticks=4000)))[0]
    counts = [len(extract_vcrb(batch, r)) for r in (5, 7, 9, 11)]
    assert min(counts) > 50


def _resistance_path():
    return list(range(70, 101)) + list(range(99, 79, -1)) + list(range(81, 99))


def test_price_level_resistance_by_hand():
    events = extract_price_levels(make_batch(_resistance_path()), lookback_ticks=50)
    assert len(events) == 1
    e = events[0]
    assert e.kind is PatternKind.PRICE_LEVEL
    assert (e.target_price_idx, e.side, e.formation_tick_index) == (100, Side.TARGET_ABOVE, 68)


def test_price_level_support_mirror():
    mirrored = [200 - p for p in _resistance_path()]
    events = extract_price_levels(make_batch(mirrored), lookback_ticks=50)
    assert [(e.target_price_idx, e.side) for e in events] == [(100, Side.TARGET_BELOW)]


def test_price_level_fires_once_until_rearmed():
    path = _resistance_path() + [99, 98, 99, 98]
    assert len(extract_price_levels(make_batch(path), lookback_ticks=50)) == 1
    # a second full rejection re-arms the level
    path += list(range(97, 84, -1)) + list(range(85, 99))
    assert len(extract_price_levels(make_batch(path), lookback_ticks=200)) == 2


def test_price_level_deregistered_after_cross():
    path = _resistance_path()[:-3] + list(range(95, 104)) + list(range(102, 84, -1)) + list(range(85, 99))
    crossed = path.index(103)
    events = [e for e in extract_price_levels(make_batch(path), lookback_ticks=200) if e.target_price_idx == 100]
    # fires on the way up, never again once crossed by 3 ticks
    assert len(events) == 1 and events[0].formation_tick_index < crossed


def test_volume_profile_levels():
    batch = make_batch([5, 6, 6, 8], bid_volume=[1, 2, 3, 4], ask_volume=[0, 1, 1, 0])
    prof = VolumeProfile.from_ticks(batch.ticks)
    assert prof.base_price_idx == 5 and prof.n_levels == 4
    assert prof.level(6) == (5, 2, 2, 2, 2)
    assert prof.level(7) == (0, 0, 0, 0, 0)
    assert prof.level(42) == (0, 0, 0, 0, 0)


def test_event_table_roundtrip(tmp_path):
    batch = split_batches(generate_synthetic(0, SyntheticConfig(n_ticks=3000)))[0]
    events = extract_vcrb(batch, 7) + extract_price_levels(batch)
    write_events(tmp_path / "e.tsv", events)
    back = read_events(tmp_path / "e.tsv", {batch.label: batch})
    assert len(back) == len(events)
    for a, b in zip(events, back):
        assert (a.kind, a.target_price_idx, a.formation_tick_index, a.side) == \
               (b.kind, b.target_price_idx, b.formation_tick_index, b.side)
        if a.profile is not None:
            assert np.array_equal(a.profile.total_volume, b.profile.total_volume)
