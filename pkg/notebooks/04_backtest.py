"""
Backtest arithmetic and rolling Sharpe
======================================

Profitability thresholds for the 15/3 strategy, a small simulated trade
tape, and the rolling annualized Sharpe ratio of a return series.
"""

import math

import numpy as np

from vcrb_lab.backtest import StrategyConfig, equity_curve, profitability_threshold, rolling_sharpe, simulate
from vcrb_lab.market_data import Batch, TickArray
from vcrb_lab.patterns import PatternEvent, PatternKind, Side

for spread in (0.0, 1.0):
    cfg = StrategyConfig(spread_ticks=spread)
    print(f"spread {spread}: threshold {profitability_threshold(cfg):.4f}")

###############################################################################
# Ten approaches to a level at 100, alternating reversal and crossing.

prices, events = [], []
for k in range(10):
    base = len(prices)
    prices += [105, 104, 103, 102, 101, 100]
    prices += list(range(101, 116)) if k % 2 == 0 else [99, 98, 97]
    prices += [106]
    e = PatternEvent(PatternKind.VCRB, 100, base, Side.TARGET_BELOW)
    e.trigger_tick_index, e.approach_side = base + 3, 1
    events.append(e)

n = len(prices)
ts = np.arange(n, dtype=np.int64) * 3_600_000  # one tick per hour
ones = np.ones(n, dtype=np.int64)
ticks = TickArray(ts, ts + 1, prices, ones, ones, ones, ones)
res = simulate(events, [0.8] * len(events), ticks)
for t in res.trades:
    print(t.entry_index, t.exit_reason.value, t.pnl_ticks)

curve = equity_curve(res.trades, ticks.start_ts_ms)
print("final equity", curve.final, "ticks over", len(curve.days), "days")

###############################################################################
# Rolling Sharpe on i.i.d. daily returns. Windows overlap, so the rolling
# mean moves with the realized sample mean rather than the generating one.

mu, sigma = 0.001, 0.01
closed = math.sqrt(252) * (mu - 0.05 / 252) / sigma
for seed in range(3):
    r = np.random.default_rng(seed).normal(mu, sigma, 1000)
    s = rolling_sharpe(r)
    print(f"seed {seed}: rolling mean {np.nanmean(s.raw):.3f}, closed form {closed:.3f}, "
          f"first defined {s.first_defined}")
