"""Tick ingestion, batching and a synthetic stream generator with a planted signal.

Prices are carried as integer tick indices (``round(price / tick_size)``) from
the loader onward, so every distance downstream is integer arithmetic.
"""

from __future__ import annotations

import gzip
import io
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

COLUMNS = (
    "start_ts_ms",
    "end_ts_ms",
    "price_idx",
    "bid_volume",
    "ask_volume",
    "bid_trades",
    "ask_trades",
)


class TickFormatError(ValueError):
    """Raised for malformed or inconsistent tick input."""


@dataclass(frozen=True)
class InstrumentSpec:
    symbol: str
    tick_size: float
    session_calendar: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.tick_size > 0:
            raise ValueError(f"tick_size must be positive, got {self.tick_size}")


@dataclass(frozen=True)
class TickRecord:
    start_ts_ms: int
    end_ts_ms: int
    price_idx: int
    bid_volume: int
    ask_volume: int
    bid_trades: int
    ask_trades: int


def _check_consistency(bv, av, bt, at) -> np.ndarray:
    """Row mask of trade/volume consistency violations."""
    bad = (bv < 0) | (av < 0) | (bt < 0) | (at < 0)
    bad |= (bt == 0) & (bv != 0)
    bad |= (at == 0) & (av != 0)
    bad |= (bt > 0) & (bv < bt)
    bad |= (at > 0) & (av < at)
    return bad


class TickArray:
    """Columnar, immutable sequence of ticks.

    Indexing with an integer returns a :class:`TickRecord`; slicing returns a
    new ``TickArray`` sharing no mutable state with the original.
    """

    __slots__ = COLUMNS

    def __init__(self, start_ts_ms, end_ts_ms, price_idx, bid_volume, ask_volume,
                 bid_trades, ask_trades, validate: bool = True):
        cols = [np.array(c, dtype=np.int64, copy=True).reshape(-1) for c in
                (start_ts_ms, end_ts_ms, price_idx, bid_volume, ask_volume, bid_trades, ask_trades)]
        n = len(cols[0])
        if any(len(c) != n for c in cols):
            raise ValueError("tick columns must have equal length")
        for name, col in zip(COLUMNS, cols):
            col.setflags(write=False)
            object.__setattr__(self, name, col)
        if validate and n:
            if np.any(self.end_ts_ms < self.start_ts_ms):
                i = int(np.argmax(self.end_ts_ms < self.start_ts_ms))
                raise TickFormatError(f"tick {i}: end_ts_ms before start_ts_ms")
            bad = _check_consistency(self.bid_volume, self.ask_volume, self.bid_trades, self.ask_trades)
            if bad.any():
                raise TickFormatError(f"tick {int(np.argmax(bad))}: trade/volume consistency violated")

    def __setattr__(self, key, value):
        raise AttributeError("TickArray is immutable")

    @classmethod
    def empty(cls) -> "TickArray":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, z, z, z)

    @classmethod
    def from_records(cls, records: Sequence[TickRecord]) -> "TickArray":
        if not records:
            return cls.empty()
        return cls(*(np.array([getattr(r, c) for r in records]) for c in COLUMNS))

    @classmethod
    def concatenate(cls, parts: Sequence["TickArray"]) -> "TickArray":
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, c) for p in parts]) for c in COLUMNS), validate=False)

    def __len__(self) -> int:
        return len(self.price_idx)

    def __getitem__(self, item):
        if isinstance(item, slice):
            return TickArray(*(getattr(self, c)[item] for c in COLUMNS), validate=False)
        if isinstance(item, (int, np.integer)):
            return TickRecord(*(int(getattr(self, c)[item]) for c in COLUMNS))
        raise TypeError(f"unsupported index {item!r}")

    def __iter__(self) -> Iterator[TickRecord]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TickArray):
            return NotImplemented
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in COLUMNS)

    def __repr__(self) -> str:
        return f"TickArray(n={len(self)})"

    @property
    def volume(self) -> np.ndarray:
        return self.bid_volume + self.ask_volume

    def take(self, idx) -> "TickArray":
        return TickArray(*(getattr(self, c)[idx] for c in COLUMNS), validate=False)


def _open_text(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def load_ticks(path, spec: InstrumentSpec, on_unsorted: str = "raise") -> TickArray:
    """Read a comma-separated Time&Sales file into a :class:`TickArray`.

    Each line is ``start_ts_ms,end_ts_ms,price,bid_volume,ask_volume,bid_trades,ask_trades``.
    A non-numeric first field on the first line marks a header. Files ending in
    ``.gz`` are decompressed transparently.

    ``on_unsorted`` controls non-monotonic start timestamps: ``"raise"`` rejects
    the file, ``"sort"`` logs a warning and stably sorts by start time.
    """
    if on_unsorted not in ("raise", "sort"):
        raise ValueError("on_unsorted must be 'raise' or 'sort'")
    path = Path(path)
    rows = []
    linenos = []
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if lineno == 1 and not _is_number(parts[0]):
                continue
            if len(parts) != 7:
                raise TickFormatError(f"line {lineno}: expected 7 fields, got {len(parts)}")
            try:
                start, end = int(parts[0]), int(parts[1])
                price = float(parts[2])
                bv, av, bt, at = (int(p) for p in parts[3:])
            except ValueError as exc:
                raise TickFormatError(f"line {lineno}: {exc}") from None
            ratio = price / spec.tick_size
            idx = round(ratio)
            if abs(ratio - idx) > 1e-9 * max(1.0, abs(ratio)):
                raise TickFormatError(
                    f"line {lineno}: price {parts[2]} is not a multiple of tick size {spec.tick_size}")
            if end < start:
                raise TickFormatError(f"line {lineno}: end timestamp precedes start timestamp")
            rows.append((start, end, idx, bv, av, bt, at))
            linenos.append(lineno)
    if not rows:
        return TickArray.empty()
    data = np.array(rows, dtype=np.int64)
    bad = np.flatnonzero(_check_consistency(*data[:, 3:].T))
    if bad.size:
        raise TickFormatError(f"line {linenos[bad[0]]}: trade/volume consistency violated")
    if np.any(np.diff(data[:, 0]) < 0):
        if on_unsorted == "raise":
            i = int(np.argmax(np.diff(data[:, 0]) < 0)) + 1
            raise TickFormatError(f"record {i}: start timestamps are not monotonic")
        logger.warning("%s: non-monotonic timestamps, sorting by start time", path)
        data = data[np.argsort(data[:, 0], kind="stable")]
    return TickArray(*data.T)


def format_price(price_idx: int, tick_size: float) -> str:
    decimals = max(0, -math.floor(math.log10(tick_size)) + 6) if tick_size < 1 else 6
    text = f"{price_idx * tick_size:.{decimals}f}".rstrip("0").rstrip(".")
    return text or "0"


def write_ticks(path, ticks: TickArray, spec: InstrumentSpec, header: bool = True) -> None:
    path = Path(path)
    opener = (lambda p: io.TextIOWrapper(gzip.open(p, "wb"), encoding="utf-8")) if path.suffix == ".gz" \
        else (lambda p: open(p, "w", encoding="utf-8"))
    with opener(path) as fh:
        if header:
            fh.write("start_ts_ms,end_ts_ms,price,bid_volume,ask_volume,bid_trades,ask_trades\n")
        for r in ticks:
            fh.write(f"{r.start_ts_ms},{r.end_ts_ms},{format_price(r.price_idx, spec.tick_size)},"
                     f"{r.bid_volume},{r.ask_volume},{r.bid_trades},{r.ask_trades}\n")


# --------------------------------------------------------------------------- batches


@dataclass(frozen=True)
class Batch:
    label: str
    ticks: TickArray
    start_ts: int
    end_ts: int

    def __len__(self) -> int:
        return len(self.ticks)


def _month_start_ms(year: int, month: int) -> int:
    return int(datetime(year, month, 1, tzinfo=timezone.utc).timestamp() * 1000)


def _add_months(year: int, month: int, k: int) -> tuple[int, int]:
    m = (year * 12 + month - 1) + k
    return m // 12, m % 12 + 1


def split_batches(ticks: TickArray, months_per_batch: int = 3) -> list[Batch]:
    """Partition ticks into consecutive calendar-month batches.

    The first batch starts at 00:00 UTC on the first day of the month holding
    the first tick; labels read ``"M/YY to M/YY"`` with an exclusive end month.
    Empty intermediate batches are kept.
    """
    if months_per_batch < 1:
        raise ValueError("months_per_batch must be >= 1")
    if len(ticks) == 0:
        return []
    first = datetime.fromtimestamp(ticks.start_ts_ms[0] / 1000, tz=timezone.utc)
    y, m = first.year, first.month
    last_ts = int(ticks.start_ts_ms[-1])
    batches = []
    while True:
        ny, nm = _add_months(y, m, months_per_batch)
        lo, hi = _month_start_ms(y, m), _month_start_ms(ny, nm)
        a, b = np.searchsorted(ticks.start_ts_ms, [lo, hi], side="left")
        label = f"{m}/{y % 100:02d} to {nm}/{ny % 100:02d}"
        batches.append(Batch(label=label, ticks=ticks[int(a):int(b)], start_ts=lo, end_ts=hi))
        if hi > last_ts:
            break
        y, m = ny, nm
    return batches


# --------------------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the episode-based synthetic tick stream.

    Every episode plants a volume peak at a target price, moves away, returns,
    and then reverses or crosses. The bid/ask volume ratio of the episode's
    flow is the planted signal: bid-dominant episodes reverse with probability
    ``reversal_prob + signal_delta / 2``, ask-dominant ones with
    ``reversal_prob - signal_delta / 2``.
    """

    n_ticks: int = 50_000
    start_ts_ms: int = 1_488_326_400_000  # 2017-03-01 00:00 UTC
    tick_interval_ms: int = 60_000
    base_price_idx: int = 10_000
    price_band: int = 4_000
    # re-centring jump between episodes; must exceed the widest buffer span
    jump_min: int = 20
    jump_max: int = 60
    # optional random-walk wander after the peak forms, (up, down, flat)
    wander_ticks: int = 0
    step_probs: tuple[float, float, float] = (0.5, 0.5, 0.0)
    entry_levels: int = 6
    accumulation_ticks: int = 6
    rise_min: int = 8
    rise_max: int = 12
    base_trades: float = 3.0
    mean_trade_size: float = 2.0
    max_imbalance: float = 2.0
    reversal_prob: float = 0.5
    excluded_prob: float = 0.05
    signal_delta: float = 0.2
    block_size: int = 20
    reversal_ticks: int = 15
    crossing_ticks: int = 3

    def validate(self) -> None:
        positive = ("n_ticks", "tick_interval_ms", "jump_min", "entry_levels", "accumulation_ticks",
                    "rise_min", "block_size", "reversal_ticks", "crossing_ticks")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.jump_max < self.jump_min:
            raise ValueError("jump_max must be >= jump_min")
        if self.rise_max < self.rise_min:
            raise ValueError("rise_max must be >= rise_min")
        if self.accumulation_ticks < 2:
            raise ValueError("accumulation_ticks must be >= 2 for a unique volume peak")
        if self.wander_ticks < 0:
            raise ValueError("wander_ticks must be >= 0")
        if len(self.step_probs) != 3 or any(p < 0 or p > 1 for p in self.step_probs) \
                or not math.isclose(sum(self.step_probs), 1.0):
            raise ValueError("step_probs must be three probabilities summing to 1")
        if self.base_trades < 1 or self.mean_trade_size < 1 or self.max_imbalance < 1:
            raise ValueError("base_trades, mean_trade_size and max_imbalance must be >= 1")
        hi = self.reversal_prob + self.signal_delta / 2
        lo = self.reversal_prob - self.signal_delta / 2
        for p in (self.reversal_prob, self.excluded_prob, hi, lo):
            if not 0.0 <= p <= 1.0:
                raise ValueError("reversal/excluded probabilities must lie in [0, 1]")
        if hi + self.excluded_prob > 1.0:
            raise ValueError("reversal_prob + signal_delta/2 + excluded_prob exceeds 1")


@dataclass(frozen=True)
class Episode:
    start_index: int
    touch_index: int
    target_price_idx: int
    approach_side: int  # +1: approached from above, -1: from below
    bid_dominant: bool
    outcome: str  # "reversal" | "crossing" | "excluded"


@dataclass
class _OutcomeDeck:
    """Stratified outcome draws: each block holds the configured mix exactly."""

    p_rev: float
    p_excl: float
    block: int
    rng: np.random.Generator
    queue: list = field(default_factory=list)

    def draw(self) -> str:
        if not self.queue:
            n_rev = round(self.block * self.p_rev)
            n_excl = round(self.block * self.p_excl)
            deck = ["reversal"] * n_rev + ["excluded"] * n_excl
            deck += ["crossing"] * (self.block - len(deck))
            self.rng.shuffle(deck)
            self.queue = deck
        return self.queue.pop()


def generate_synthetic(seed: int, config: SyntheticConfig, return_episodes: bool = False):
    """Generate a deterministic tick stream with a planted conditional signal.

    Episodes are joined by price jumps wider than any buffer span, so no range
    buffer survives from one episode into the next. Within an episode every
    tick carries the same bid/ask aggregates; only the accumulation at the
    target repeats a price level often enough to form a strict volume peak.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    decks = {
        True: _OutcomeDeck(config.reversal_prob + config.signal_delta / 2, config.excluded_prob,
                           config.block_size, np.random.default_rng([seed, 1])),
        False: _OutcomeDeck(config.reversal_prob - config.signal_delta / 2, config.excluded_prob,
                            config.block_size, np.random.default_rng([seed, 2])),
    }
    n = config.n_ticks
    prices = np.empty(n, dtype=np.int64)
    vols = np.empty((n, 4), dtype=np.int64)
    episodes = []
    pos = 0
    price = config.base_price_idx
    lo_band = config.base_price_idx - config.price_band
    hi_band = config.base_price_idx + config.price_band
    p_up, p_down, _ = config.step_probs

    while pos < n:
        # per-episode flow: constant aggregates on every tick
        while True:
            trades = 1 + rng.poisson(config.base_trades - 1)
            size = 1 + rng.poisson(config.mean_trade_size - 1)
            ratio = math.exp(rng.uniform(-math.log(config.max_imbalance), math.log(config.max_imbalance)))
            bt = max(1, round(trades * math.sqrt(ratio)))
            at = max(1, round(trades / math.sqrt(ratio)))
            if bt != at:
                break
        flow = (bt * size, at * size, bt, at)
        bid_dominant = bt > at
        outcome = decks[bid_dominant].draw()

        jump = int(rng.integers(config.jump_min, config.jump_max + 1))
        direction = 1 if rng.random() < 0.5 else -1
        if not lo_band <= price + direction * jump <= hi_band:
            direction = -direction
        d = 1 if rng.random() < 0.5 else -1  # peak is left towards +d and re-approached from that side
        target = price + direction * jump + d * config.entry_levels
        rise = int(rng.integers(config.rise_min, config.rise_max + 1))

        path = [target - d * k for k in range(config.entry_levels, 0, -1)]
        path += [target] * config.accumulation_ticks
        path += [target + d * k for k in range(1, config.entry_levels + rise + 1)]
        for _ in range(config.wander_ticks):
            u = rng.random()
            step = d if u < p_up else (-d if u < p_up + p_down else 0)
            nxt = path[-1] + step
            # keep the wander clear of the target neighbourhood
            if (nxt - target) * d <= config.entry_levels:
                nxt = path[-1]
            path.append(nxt)
        path += [target + d * 2, target + d * 1]
        touch_offset = len(path)
        path.append(target)
        rev, cross = config.reversal_ticks, config.crossing_ticks
        extra = int(rng.integers(0, 4))
        if outcome == "reversal":
            path += [target + d * k for k in range(1, rev + extra + 1)]
        elif outcome == "crossing":
            path += [target - d * k for k in range(1, cross + extra + 1)]
        else:
            depth = int(rng.integers(1, cross))
            path += [target - d * k for k in range(1, depth + 1)]
            path += [target - d * k for k in range(depth - 1, 0, -1)]
            path += [target + d * k for k in range(0, rev + extra + 1)]

        take = min(len(path), n - pos)
        prices[pos:pos + take] = path[:take]
        vols[pos:pos + take] = flow
        if take == len(path):
            episodes.append(Episode(start_index=pos, touch_index=pos + touch_offset, target_price_idx=target,
                                    approach_side=d, bid_dominant=bid_dominant, outcome=outcome))
        pos += take
        price = path[take - 1]

    start = config.start_ts_ms + np.arange(n, dtype=np.int64) * config.tick_interval_ms
    end = start + rng.integers(0, max(1, config.tick_interval_ms // 2), size=n)
    ticks = TickArray(start, end, prices, vols[:, 0], vols[:, 1], vols[:, 2], vols[:, 3])
    if return_episodes:
        return ticks, episodes
    return ticks
