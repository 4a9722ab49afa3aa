"""Limit-order take-profit/stop-loss backtest, daily equity and rolling Sharpe ratios."""

from __future__ import annotations

import datetime as dt
import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .market_data import TickArray
from .patterns import PatternEvent

MS_PER_DAY = 86_400_000


@dataclass(frozen=True)
class StrategyConfig:
    take_profit_ticks: int = 15
    stop_loss_ticks: int = 3
    fee_ticks: float = 0.5
    spread_ticks: float = 0.0
    threshold: float = 0.5
    expiry_ticks: int = 5000  # unfilled orders cancel this many ticks after formation
    notional_ticks: float = 1000.0

    def __post_init__(self):
        if not self.take_profit_ticks > self.stop_loss_ticks > 0:
            raise ValueError("require take_profit_ticks > stop_loss_ticks > 0")
        if self.fee_ticks < 0 or self.spread_ticks < 0:
            raise ValueError("fee_ticks and spread_ticks must be >= 0")
        if self.notional_ticks <= 0:
            raise ValueError("notional_ticks must be positive")

    @property
    def cost(self) -> float:
        return self.fee_ticks + self.spread_ticks


def profitability_threshold(config: StrategyConfig) -> float:
    """Break-even precision when every trade ends at the full profit or full loss."""
    den = config.take_profit_ticks - config.cost
    if den <= 0:
        raise ValueError("costs consume the whole take-profit")
    return (config.stop_loss_ticks + config.cost) / den


class ExitReason(str, enum.Enum):
    TAKE_PROFIT = "TakeProfit"
    STOP_LOSS = "StopLoss"
    END_OF_DATA = "EndOfData"


@dataclass(frozen=True)
class TradeRecord:
    signal_index: int
    entry_index: int
    entry_price_idx: int
    exit_index: int
    exit_price_idx: int
    direction: int  # +1 long, -1 short
    pnl_ticks: float
    exit_reason: ExitReason
    exit_ts_ms: int = 0
    batch: str = ""


@dataclass
class SimulationResult:
    trades: list[TradeRecord] = field(default_factory=list)
    cancelled: int = 0
    skipped_busy: int = 0


def simulate(events: Sequence[PatternEvent], probabilities: Sequence[float], ticks: TickArray,
             config: StrategyConfig = StrategyConfig(), batch: str = "") -> SimulationResult:
    """Trade the events predicted positive, one position at a time.

    At the trigger tick a limit order rests at the target. It fills on the
    first later tick at or through the target and opens toward the approach
    side. The position exits at exactly the take-profit or stop-loss level.
    An order still unfilled ``expiry_ticks`` after formation is cancelled.
    A position open at the end of the data is closed at the last price.
    While an order or position is live, later signals are ignored.
    """
    if len(events) != len(probabilities):
        raise ValueError("one probability per event required")
    prices = ticks.price_idx
    n = len(prices)
    out = SimulationResult()
    busy_until = -1
    order = sorted((e.trigger_tick_index, k) for k, e in enumerate(events) if e.trigger_tick_index is not None)
    tp, sl, cost = config.take_profit_ticks, config.stop_loss_ticks, config.cost
    for trig, k in order:
        if probabilities[k] < config.threshold:
            continue
        if trig <= busy_until:
            out.skipped_busy += 1
            continue
        e = events[k]
        x = e.target_price_idx
        s = e.approach_side or int(np.sign(prices[trig] - x))
        if s == 0:
            continue
        last_fill = min(n - 1, e.formation_tick_index + config.expiry_ticks)
        dist = (prices[trig + 1:last_fill + 1] - x) * s
        hit = np.flatnonzero(dist <= 0)
        if hit.size == 0:
            out.cancelled += 1
            busy_until = last_fill
            continue
        entry = trig + 1 + int(hit[0])
        after = (prices[entry:] - x) * s
        up = np.flatnonzero(after >= tp)
        down = np.flatnonzero(after <= -sl)
        first_up = int(up[0]) if up.size else None
        first_down = int(down[0]) if down.size else None
        if first_down is not None and (first_up is None or first_down < first_up):
            exit_i, exit_p, gross, reason = entry + first_down, x - s * sl, -sl, ExitReason.STOP_LOSS
        elif first_up is not None:
            exit_i, exit_p, gross, reason = entry + first_up, x + s * tp, tp, ExitReason.TAKE_PROFIT
        else:
            exit_i, exit_p = n - 1, int(prices[-1])
            gross, reason = (exit_p - x) * s, ExitReason.END_OF_DATA
        out.trades.append(TradeRecord(
            signal_index=trig, entry_index=entry, entry_price_idx=x, exit_index=exit_i,
            exit_price_idx=int(exit_p), direction=s, pnl_ticks=float(gross - cost),
            exit_reason=reason, exit_ts_ms=int(ticks.end_ts_ms[exit_i]), batch=batch))
        busy_until = exit_i
    return out


@dataclass
class EquityCurve:
    days: list[dt.date]
    daily_pnl: np.ndarray
    cumulative: np.ndarray
    notional_ticks: float

    @property
    def returns(self) -> np.ndarray:
        return self.daily_pnl / self.notional_ticks

    @property
    def final(self) -> float:
        return float(self.cumulative[-1]) if len(self.cumulative) else 0.0


def _day(ts_ms: int) -> dt.date:
    return dt.datetime.fromtimestamp(ts_ms / 1000, tz=dt.timezone.utc).date()


def equity_curve(trades: Sequence[TradeRecord], day_ts_ms: Sequence[int],
                 notional_ticks: float = 1000.0) -> EquityCurve:
    """Daily profit in ticks, booked on the exit day, over every UTC day that traded.

    ``day_ts_ms`` lists tick timestamps whose UTC dates define the trading days.
    """
    days = sorted({_day(int(t)) for t in np.unique(np.asarray(day_ts_ms, dtype=np.int64) // MS_PER_DAY
                                                    * MS_PER_DAY)} | {_day(t.exit_ts_ms) for t in trades})
    pos = {d: i for i, d in enumerate(days)}
    pnl = np.zeros(len(days))
    for t in trades:
        pnl[pos[_day(t.exit_ts_ms)]] += t.pnl_ticks
    return EquityCurve(days, pnl, np.cumsum(pnl), notional_ticks)


@dataclass
class RollingSharpe:
    raw: np.ndarray  # aligned to equity points; index d uses the d-th trailing window
    smoothed: np.ndarray
    window_days: int

    @property
    def first_defined(self) -> int | None:
        ok = np.flatnonzero(np.isfinite(self.raw))
        return int(ok[0]) if ok.size else None


def rolling_sharpe(returns, risk_free_annual: float = 0.05, window_days: int = 252,
                   smooth_days: int = 90) -> RollingSharpe:
    """Annualized Sharpe over trailing windows of daily returns.

    The output has one entry per equity point (start plus one per day).
    Entry ``d`` uses returns ``d - window_days .. d - 1`` and is NaN before
    ``window_days`` or when the window has zero spread. ``smoothed`` is the
    trailing ``smooth_days`` mean of the defined values.
    """
    r = returns.returns if isinstance(returns, EquityCurve) else np.asarray(returns, dtype=float)
    n = len(r)
    if n < window_days:
        raise ValueError(f"need at least {window_days} daily returns, got {n}")
    rf = risk_free_annual / 252
    raw = np.full(n + 1, np.nan)
    win = np.lib.stride_tricks.sliding_window_view(r, window_days)  # win[k] = r[k:k+window]
    mu = win.mean(axis=1)
    sd = win.std(axis=1, ddof=1)
    # exact test: rounding leaves a tiny nonzero sd on constant windows
    flat = win.max(axis=1) == win.min(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(flat, np.nan, (mu - rf) / sd * math.sqrt(252))
    raw[window_days:] = s
    smoothed = np.full(n + 1, np.nan)
    for d in range(window_days, n + 1):
        vals = raw[max(0, d - smooth_days + 1):d + 1]
        vals = vals[np.isfinite(vals)]
        if vals.size:
            smoothed[d] = vals.mean()
    return RollingSharpe(raw, smoothed, window_days)


def write_trades(path, trades: Sequence[TradeRecord]) -> None:
    cols = ("batch", "signal_index", "entry_index", "entry_price_idx", "exit_index", "exit_price_idx",
            "direction", "pnl_ticks", "exit_reason", "exit_ts_ms")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for t in trades:
            fh.write("\t".join([t.batch, str(t.signal_index), str(t.entry_index), str(t.entry_price_idx),
                                str(t.exit_index), str(t.exit_price_idx), str(t.direction),
                                repr(t.pnl_ticks), t.exit_reason.value, str(t.exit_ts_ms)]) + "\n")


def write_equity(path, curve: EquityCurve, sharpe: RollingSharpe | None = None) -> None:
    """Per-day equity; Sharpe columns refer to the equity point closing that day."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("date\tdaily_pnl_ticks\tcumulative_ticks\trolling_sharpe\tsmoothed_sharpe\n")
        for i, d in enumerate(curve.days):
            raw = sm = "NA"
            if sharpe is not None:
                a, b = sharpe.raw[i + 1], sharpe.smoothed[i + 1]
                raw = "NA" if math.isnan(a) else repr(float(a))
                sm = "NA" if math.isnan(b) else repr(float(b))
            fh.write(f"{d.isoformat()}\t{curve.daily_pnl[i]!r}\t{curve.cumulative[i]!r}\t{raw}\t{sm}\n")
