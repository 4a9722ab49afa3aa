"""Volume-centred range bar (VCRB) and price-level pattern extraction."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .market_data import Batch, TickArray


class PatternKind(str, enum.Enum):
    VCRB = "VCRB"
    PRICE_LEVEL = "PriceLevel"


class Side(str, enum.Enum):
    """Where the target sits relative to the market price at formation."""

    TARGET_ABOVE = "TargetAbove"
    TARGET_BELOW = "TargetBelow"


class Label(str, enum.Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"
    EXCLUDED = "Excluded"
    UNRESOLVED = "Unresolved"


@dataclass(frozen=True)
class VolumeProfile:
    """Per-price aggregates; ``levels[k]`` describes price ``base_price_idx + k``."""

    base_price_idx: int
    bid_volume: np.ndarray
    ask_volume: np.ndarray
    bid_trades: np.ndarray
    ask_trades: np.ndarray
    n_ticks: np.ndarray

    @classmethod
    def from_ticks(cls, ticks: TickArray, lo: int | None = None, hi: int | None = None) -> "VolumeProfile":
        prices = ticks.price_idx
        lo = int(prices.min()) if lo is None else lo
        hi = int(prices.max()) if hi is None else hi
        keep = (prices >= lo) & (prices <= hi)
        offs = prices[keep] - lo
        size = hi - lo + 1

        def agg(col):
            return np.bincount(offs, weights=col[keep], minlength=size).astype(np.int64)

        return cls(lo, agg(ticks.bid_volume), agg(ticks.ask_volume), agg(ticks.bid_trades),
                   agg(ticks.ask_trades), np.bincount(offs, minlength=size).astype(np.int64))

    @property
    def n_levels(self) -> int:
        return len(self.bid_volume)

    @property
    def total_volume(self) -> np.ndarray:
        return self.bid_volume + self.ask_volume

    @property
    def max_price_idx(self) -> int:
        return self.base_price_idx + self.n_levels - 1

    def level(self, price_idx: int) -> tuple[int, int, int, int, int]:
        """(bid_volume, ask_volume, bid_trades, ask_trades, n_ticks) at a price; zeros off-profile."""
        k = price_idx - self.base_price_idx
        if 0 <= k < self.n_levels:
            return (int(self.bid_volume[k]), int(self.ask_volume[k]), int(self.bid_trades[k]),
                    int(self.ask_trades[k]), int(self.n_ticks[k]))
        return (0, 0, 0, 0, 0)

    def covers(self, price_idx: int) -> bool:
        return self.base_price_idx <= price_idx <= self.max_price_idx


@dataclass
class PatternEvent:
    kind: PatternKind
    target_price_idx: int
    formation_tick_index: int
    side: Side
    profile: VolumeProfile | None = None
    first_tick_index: int | None = None
    range_levels: int | None = None
    batch_label: str = ""
    trigger_tick_index: int | None = None
    touch_tick_index: int | None = None
    resolve_tick_index: int | None = None
    approach_side: int = 0
    label: Label = Label.UNRESOLVED
    features: dict = field(default_factory=dict)


def _side(target: int, market: int) -> Side:
    return Side.TARGET_ABOVE if target > market else Side.TARGET_BELOW


def completion_indices(prices: np.ndarray, span: int) -> np.ndarray:
    """For every start ``i`` the first ``j >= i`` with ``max(p[i..j]) - min(p[i..j]) >= span``.

    Entries are ``-1`` where the span is never reached. Two monotone deques
    make this linear in the stream length.
    """
    n = len(prices)
    out = np.full(n, -1, dtype=np.int64)
    if span <= 0:
        return np.arange(n, dtype=np.int64)
    p = prices.tolist()
    maxq: deque = deque()
    minq: deque = deque()
    j = -1
    for i in range(n):
        while maxq and maxq[0] < i:
            maxq.popleft()
        while minq and minq[0] < i:
            minq.popleft()
        if j < i - 1:
            j = i - 1
        while (not maxq or p[maxq[0]] - p[minq[0]] < span) and j + 1 < n:
            j += 1
            while maxq and p[maxq[-1]] <= p[j]:
                maxq.pop()
            maxq.append(j)
            while minq and p[minq[-1]] >= p[j]:
                minq.pop()
            minq.append(j)
        if maxq and p[maxq[0]] - p[minq[0]] >= span:
            out[i] = j
        else:
            break
    return out


def extract_vcrb(batch: Batch, range_levels: int) -> list[PatternEvent]:
    """Run the per-price buffer automaton and return volume-centred range bars.

    A buffer opens at every tick whose price has no open buffer; every open
    buffer takes every tick, and a buffer closes on the tick that makes its
    span reach ``range_levels - 1``. Exact-span buffers whose strict total
    volume maximum sits on the centre level become events; overshooting
    buffers (price gaps) are dropped.
    """
    if range_levels < 3 or range_levels % 2 == 0:
        raise ValueError(f"range_levels must be odd and >= 3, got {range_levels}")
    ticks = batch.ticks
    prices = ticks.price_idx
    span = range_levels - 1
    ends = completion_indices(prices, span)
    closes_at: dict[int, int] = {}
    candidates = []
    for i, p in enumerate(prices.tolist()):
        c = closes_at.get(p)
        if c is not None and (c < 0 or c >= i):
            continue
        e = int(ends[i])
        closes_at[p] = e
        if e >= 0:
            candidates.append((e, i))
    candidates.sort()

    events = []
    volume = ticks.volume
    centre = span // 2
    for end, start in candidates:
        p = prices[start:end + 1]
        lo, hi = int(p.min()), int(p.max())
        if hi - lo != span:
            continue
        total = np.bincount(p - lo, weights=volume[start:end + 1], minlength=range_levels)
        peak = total[centre]
        if peak <= 0 or np.count_nonzero(total >= peak) != 1:
            continue
        profile = VolumeProfile.from_ticks(ticks[start:end + 1], lo, hi)
        target = lo + centre
        events.append(PatternEvent(
            kind=PatternKind.VCRB, target_price_idx=target, formation_tick_index=end,
            side=_side(target, int(prices[end])), profile=profile, first_tick_index=start,
            range_levels=range_levels, batch_label=batch.label))
    return events


def extract_price_levels(batch: Batch, lookback_ticks: int = 500, rejection_ticks: int = 15,
                         approach_ticks: int = 2, deregister_ticks: int = 3) -> list[PatternEvent]:
    """Detect approaches to support/resistance levels.

    A window maximum becomes a resistance once price trades ``rejection_ticks``
    below it (mirrored for supports). An event fires on the first tick that
    comes back to within ``approach_ticks`` of the level without reaching it;
    the level re-arms only after another full rejection and is dropped once
    price trades ``deregister_ticks`` through it.

    This is an approximation of conventional price-level extraction, not a
    reproduction of any specific published detector.
    """
    if lookback_ticks < 1 or rejection_ticks < 1:
        raise ValueError("lookback_ticks and rejection_ticks must be >= 1")
    prices = batch.ticks.price_idx.tolist()
    maxq: deque = deque()
    minq: deque = deque()
    # level -> armed flag
    resistances: dict[int, bool] = {}
    supports: dict[int, bool] = {}
    events = []
    for i, p in enumerate(prices):
        while maxq and maxq[0] <= i - lookback_ticks:
            maxq.popleft()
        while minq and minq[0] <= i - lookback_ticks:
            minq.popleft()
        while maxq and prices[maxq[-1]] <= p:
            maxq.pop()
        maxq.append(i)
        while minq and prices[minq[-1]] >= p:
            minq.pop()
        minq.append(i)

        for level in list(resistances):
            if p >= level + deregister_ticks:
                del resistances[level]
            elif resistances[level]:
                if level - approach_ticks <= p < level:
                    events.append(PatternEvent(
                        kind=PatternKind.PRICE_LEVEL, target_price_idx=level, formation_tick_index=i,
                        side=Side.TARGET_ABOVE, batch_label=batch.label))
                    resistances[level] = False
            elif p <= level - rejection_ticks:
                resistances[level] = True
        for level in list(supports):
            if p <= level - deregister_ticks:
                del supports[level]
            elif supports[level]:
                if level < p <= level + approach_ticks:
                    events.append(PatternEvent(
                        kind=PatternKind.PRICE_LEVEL, target_price_idx=level, formation_tick_index=i,
                        side=Side.TARGET_BELOW, batch_label=batch.label))
                    supports[level] = False
            elif p >= level + rejection_ticks:
                supports[level] = True

        top = prices[maxq[0]]
        if p <= top - rejection_ticks and top not in resistances:
            resistances[top] = True
        bottom = prices[minq[0]]
        if p >= bottom + rejection_ticks and bottom not in supports:
            supports[bottom] = True
    return events


EVENT_COLUMNS = ("kind", "batch", "range", "first_index", "formation_index", "target", "side",
                 "trigger_index", "touch_index", "resolve_index", "approach_side", "label")


def _opt(v) -> str:
    return "" if v is None else str(v)


def event_rows(events: Iterable[PatternEvent]) -> list[list[str]]:
    return [[e.kind.value, e.batch_label, _opt(e.range_levels), _opt(e.first_tick_index),
             str(e.formation_tick_index), str(e.target_price_idx), e.side.value,
             _opt(e.trigger_tick_index), _opt(e.touch_tick_index), _opt(e.resolve_tick_index),
             str(e.approach_side), e.label.value] for e in events]


def write_events(path, events: Iterable[PatternEvent]) -> None:
    """One tab-separated line per event; profiles are rebuilt from ticks on load."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(EVENT_COLUMNS) + "\n")
        for row in event_rows(events):
            fh.write("\t".join(row) + "\n")


def read_events(path, batches: dict[str, Batch] | None = None) -> list[PatternEvent]:
    """Inverse of :func:`write_events`; VCRB profiles are recomputed when batches are given."""
    events = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != EVENT_COLUMNS:
            raise ValueError(f"{path}: unexpected event table header")
        for line in fh:
            f = dict(zip(EVENT_COLUMNS, line.rstrip("\n").split("\t")))

            def opt(key):
                return int(f[key]) if f[key] else None

            ev = PatternEvent(
                kind=PatternKind(f["kind"]), target_price_idx=int(f["target"]),
                formation_tick_index=int(f["formation_index"]), side=Side(f["side"]),
                first_tick_index=opt("first_index"), range_levels=opt("range"), batch_label=f["batch"],
                trigger_tick_index=opt("trigger_index"), touch_tick_index=opt("touch_index"),
                resolve_tick_index=opt("resolve_index"), approach_side=int(f["approach_side"]),
                label=Label(f["label"]))
            if ev.kind is PatternKind.VCRB and batches is not None and ev.batch_label in batches:
                window = batches[ev.batch_label].ticks[ev.first_tick_index:ev.formation_tick_index + 1]
                ev.profile = VolumeProfile.from_ticks(window)
            events.append(ev)
    return events
