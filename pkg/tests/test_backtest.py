import math
import statistics

import numpy as np
import pytest

from vcrb_lab.backtest import (ExitReason, StrategyConfig, equity_curve, profitability_threshold, rolling_sharpe,
                               simulate, write_equity, write_trades)
from vcrb_lab.patterns import PatternEvent, PatternKind, Side

from conftest import make_batch

DAY = 86_400_000


def ev(trigger, formation=None, target=100, side=1):
    e = PatternEvent(PatternKind.VCRB, target, trigger if formation is None else formation, Side.TARGET_BELOW)
    e.trigger_tick_index = trigger
    e.approach_side = side
    return e


APPROACH = [105, 104, 103, 102, 101, 100]  # trigger at index 3, fill at 5


def run(prices, events, probs=None, config=StrategyConfig(), step_ms=1000):
    ticks = make_batch(prices, step_ms=step_ms).ticks
    return simulate(events, probs if probs is not None else [0.9] * len(events), ticks, config), ticks


def test_reversal_earns_max_profit():
    res, _ = run(APPROACH + list(range(101, 117)), [ev(3)])
    (t,) = res.trades
    assert t.pnl_ticks == 14.5 and t.exit_reason is ExitReason.TAKE_PROFIT
    assert (t.entry_index, t.entry_price_idx, t.exit_price_idx, t.direction) == (5, 100, 115, 1)


def test_crossing_loses_max_loss():
    res, _ = run(APPROACH + [99, 98, 97, 96], [ev(3)])
    (t,) = res.trades
    assert t.pnl_ticks == -3.5 and t.exit_reason is ExitReason.STOP_LOSS and t.exit_price_idx == 97


def test_gap_exits_at_level_not_at_print():
    res, _ = run(APPROACH + [101, 90], [ev(3)])
    assert res.trades[0].exit_price_idx == 97 and res.trades[0].pnl_ticks == -3.5


def test_short_side_is_mirrored():
    prices = [95, 96, 97, 98, 99, 100] + list(range(99, 84, -1))
    res, _ = run(prices, [ev(3, side=-1)])
    assert res.trades[0].direction == -1 and res.trades[0].pnl_ticks == 14.5


def test_spread_is_deducted():
    res, _ = run(APPROACH + list(range(101, 117)), [ev(3)], config=StrategyConfig(spread_ticks=1.0))
    assert res.trades[0].pnl_ticks == 13.5


def test_overlapping_signal_is_ignored():
    prices = APPROACH + [101, 102, 101, 100] + list(range(101, 117))
    res, _ = run(prices, [ev(3), ev(7)])
    assert len(res.trades) == 1 and res.skipped_busy == 1


def test_below_threshold_is_not_traded():
    res, _ = run(APPROACH + list(range(101, 117)), [ev(3)], probs=[0.49])
    assert res.trades == [] and res.skipped_busy == 0


def test_unfilled_order_is_cancelled():
    prices = [105, 104, 103, 102, 101, 102, 103, 104, 105, 101, 100, 101]
    res, _ = run(prices, [ev(3, formation=0)], config=StrategyConfig(expiry_ticks=8))
    assert res.trades == [] and res.cancelled == 1
    res, _ = run(prices, [ev(3, formation=0)], config=StrategyConfig(expiry_ticks=20))
    assert res.trades[0].entry_index == 10


def test_end_of_data_closes_at_last_price():
    res, _ = run(APPROACH + [101, 104, 106], [ev(3)])
    t = res.trades[0]
    assert t.exit_reason is ExitReason.END_OF_DATA and t.pnl_ticks == 6 - 0.5


@pytest.mark.parametrize("spread, fee, expect", [(0.0, 0.5, 0.2414), (1.0, 0.5, 0.3333), (0.0, 0.0, 0.2)])
def test_profitability_threshold(spread, fee, expect):
    assert round(profitability_threshold(StrategyConfig(fee_ticks=fee, spread_ticks=spread)), 4) == expect


def test_threshold_rejects_costs_above_profit():
    with pytest.raises(ValueError):
        profitability_threshold(StrategyConfig(take_profit_ticks=4, stop_loss_ticks=3, fee_ticks=2, spread_ticks=2))


def episodes(outcomes):
    """Price path and events: each episode approaches 100 from above then wins or loses."""
    prices, events = [], []
    for win in outcomes:
        base = len(prices)
        prices += APPROACH + (list(range(101, 116)) if win else [99, 98, 97]) + [106]
        events.append(ev(base + 3))
    return prices, events


def test_threshold_separates_winning_and_losing_odds():
    # the threshold is the break-even ratio of wins to losses: wins * 14.5 == losses * 3.5
    thr = profitability_threshold(StrategyConfig())
    for wins, losses in [(25, 100), (24, 100), (5, 20), (3, 13), (50, 10)]:
        prices, events = episodes([True] * wins + [False] * losses)
        res, _ = run(prices, events)
        assert len(res.trades) == wins + losses
        total = sum(t.pnl_ticks for t in res.trades)
        assert (total > 0) == (wins / losses > thr)
        if wins / (wins + losses) > thr:
            assert total > 0


def test_no_lookahead_replay():
    rng = np.random.default_rng(0)
    outcomes = rng.random(30) < 0.4
    prices, events = episodes(outcomes)
    full, ticks = run(prices, events)
    for t in full.trades:
        cut = ticks[:t.exit_index + 1]
        replay = simulate(events, [0.9] * len(events), cut)
        assert t in replay.trades


def test_equity_conservation_and_days(tmp_path):
    prices, events = episodes([True, False, True, True, False] * 4)
    res, ticks = run(prices, events, step_ms=DAY // 5)
    curve = equity_curve(res.trades, ticks.start_ts_ms)
    assert curve.final == sum(t.pnl_ticks for t in res.trades)
    assert len(curve.days) == len({int(t) // DAY for t in ticks.start_ts_ms})
    assert curve.returns == pytest.approx(curve.daily_pnl / 1000.0)
    write_trades(tmp_path / "t.tsv", res.trades)
    write_equity(tmp_path / "e.tsv", curve)
    assert len((tmp_path / "t.tsv").read_text().splitlines()) == len(res.trades) + 1
    assert len((tmp_path / "e.tsv").read_text().splitlines()) == len(curve.days) + 1


def test_rolling_sharpe_by_hand():
    r = [0.01, 0.02, 0.03, 0.05]
    s = rolling_sharpe(r, risk_free_annual=0.0252, window_days=3, smooth_days=2)
    assert len(s.raw) == 5 and s.first_defined == 3
    expect3 = (statistics.mean(r[:3]) - 0.0001) / statistics.stdev(r[:3]) * math.sqrt(252)
    expect4 = (statistics.mean(r[1:]) - 0.0001) / statistics.stdev(r[1:]) * math.sqrt(252)
    assert s.raw[3] == pytest.approx(expect3) and s.raw[4] == pytest.approx(expect4)
    assert s.smoothed[3] == pytest.approx(expect3)
    assert s.smoothed[4] == pytest.approx((expect3 + expect4) / 2)


def test_rolling_sharpe_constant_returns_are_undefined():
    s = rolling_sharpe(np.full(300, 0.001))
    assert np.isnan(s.raw).all() and s.first_defined is None


def test_rolling_sharpe_first_index():
    r = np.random.default_rng(0).normal(0.001, 0.01, 1000)
    s = rolling_sharpe(r)
    assert s.first_defined == 252 and len(s.raw) == 1001
    with pytest.raises(ValueError):
        rolling_sharpe(r[:100])


def test_config_validation():
    with pytest.raises(ValueError):
        StrategyConfig(take_profit_ticks=3, stop_loss_ticks=3)
    with pytest.raises(ValueError):
        StrategyConfig(fee_ticks=-1)
