import math

import numpy as np
import pytest

from vcrb_lab.features import (FEATURE_NAMES, FeatureConfig, compute_features, feature_matrix,
                               market_shift_features, pattern_features_price_level, pattern_features_vcrb,
                               read_feature_table, write_feature_table)
from vcrb_lab.patterns import PatternEvent, PatternKind, Side, VolumeProfile

from conftest import make_batch


def profile_event():
    prof = VolumeProfile(
        base_price_idx=95,
        bid_volume=np.array([1, 1, 1, 1, 1, 20, 2, 2, 2, 2, 2]),
        ask_volume=np.array([2, 2, 2, 2, 2, 10, 1, 1, 1, 1, 1]),
        bid_trades=np.array([1, 1, 1, 1, 1, 5, 1, 1, 1, 1, 1]),
        ask_trades=np.array([1, 1, 1, 1, 1, 4, 1, 1, 1, 1, 0]),
        n_ticks=np.array([1, 1, 1, 1, 1, 5, 1, 1, 1, 1, 1]),
    )
    return PatternEvent(PatternKind.VCRB, 100, 0, Side.TARGET_ABOVE, profile=prof, first_tick_index=0,
                        range_levels=11)


def test_vcrb_pattern_features_by_hand():
    f = pattern_features_vcrb(profile_event(), make_batch([100]))
    expect = {
        "P0": 2.0, "P1": 0.5, "P2": 0.8, "P3": 1.0, "P4": 2.0, "P5": 1.0, "P6": 1.0, "P7": 2.0,
        "P8": 2.0, "P9": 2.0, "P10": 4.0, "P11": 1.0,
        "P12_-1": 0.5, "P12_0": 2.0, "P12_+1": 2.0, "P13_-1": 1.0, "P13_0": 1.25, "P13_+1": 1.0, "P14": 1.0,
    }
    assert f == pytest.approx(expect)


def test_zero_denominator_is_missing():
    e = profile_event()
    e.profile.bid_volume[:5] = 0
    f = pattern_features_vcrb(e, make_batch([100]))
    assert math.isnan(f["P0"]) and math.isnan(f["P10"])
    assert f["P6"] == 0.0  # numerator zero, denominator defined
    assert f["P1"] == 0.5


def test_levels_outside_buffer_come_from_trailing_window():
    prices = [95, 103, 105, 98, 99, 100, 100, 100, 101, 102]
    batch = make_batch(prices)
    prof = VolumeProfile.from_ticks(batch.ticks[3:10])
    e = PatternEvent(PatternKind.VCRB, 100, 9, Side.TARGET_BELOW, profile=prof, first_tick_index=3, range_levels=5)
    f = pattern_features_vcrb(e, batch)
    # upper: 101, 102 in the buffer, 103 and 105 from the window; lower: 99, 98 and 95
    assert f["P0"] == pytest.approx(4 / 3)
    assert f["P14"] == 0.0


def test_price_level_one_sided_remap():
    prices = list(range(90, 101))
    batch = make_batch(prices, bid_volume=[p - 89 for p in prices], ask_volume=[1] * len(prices))
    e = PatternEvent(PatternKind.PRICE_LEVEL, 100, len(prices) - 1, Side.TARGET_ABOVE)
    f = pattern_features_price_level(e, batch)
    assert f["P12_-1"] == 10.0  # distance 1 -> 99
    assert f["P12_+1"] == 9.0  # distance 2 -> 98
    assert f["P12_0"] == 11.0
    assert f["P0"] == pytest.approx(25 / 30)


def test_price_level_support_side():
    prices = list(range(110, 99, -1))
    batch = make_batch(prices, bid_volume=[111 - p for p in prices], ask_volume=[1] * len(prices))
    e = PatternEvent(PatternKind.PRICE_LEVEL, 100, len(prices) - 1, Side.TARGET_BELOW)
    f = pattern_features_price_level(e, batch)
    assert f["P12_-1"] == 10.0  # 101
    assert f["P12_+1"] == 9.0  # 102
    assert f["P14"] == 0.0


def ms_batch(n=300):
    bid = np.full(n, 2)
    bid[-21:] = 1
    return make_batch(np.full(n, 100), bid_volume=bid, ask_volume=np.ones(n))


def test_market_shift_windows_include_trigger():
    f = market_shift_features(ms_batch(), 299)
    assert f["MS0"] == pytest.approx(453 / 237)
    assert f["MS1"] == pytest.approx(1.0)
    assert f["MS2"] == pytest.approx(453 / 237 - 1)
    assert f["MS3"] == pytest.approx(0.0)


def test_market_shift_missing_without_history():
    b = ms_batch()
    assert all(math.isnan(v) for v in market_shift_features(b, 235).values())
    assert not math.isnan(market_shift_features(b, 236)["MS0"])
    assert all(math.isnan(v) for v in market_shift_features(b, None).values())


def test_compute_features_names_and_matrix():
    e = profile_event()
    e.trigger_tick_index = 0
    feats = compute_features(e, make_batch([100]))
    assert set(feats) == set(FEATURE_NAMES)
    e.features = feats
    X = feature_matrix([e, e])
    assert X.shape == (2, len(FEATURE_NAMES))
    assert np.isnan(X[:, FEATURE_NAMES.index("MS0")]).all()


def test_feature_table_roundtrip(tmp_path):
    X = np.array([[1.5, np.nan], [0.25, 3.0]])
    names = ["P0", "MS0"]
    keys = [{"batch": "a", "idx": 1}, {"batch": "b", "idx": 2}]
    write_feature_table(tmp_path / "f.tsv", X, names, labels=[1, 0], keys=keys)
    assert "NA" in (tmp_path / "f.tsv").read_text()
    k, X2, n2, y = read_feature_table(tmp_path / "f.tsv")
    assert np.array_equal(X, X2, equal_nan=True)
    assert n2 == names and y.tolist() == [1, 0] and k["batch"] == ["a", "b"]


def test_feature_config_validation():
    with pytest.raises(ValueError):
        FeatureConfig(short_window=0)
