"""Reversal / crossing labels for pattern events."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .market_data import Batch
from .patterns import Label, PatternEvent

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabelConfig:
    reversal_ticks: int = 15
    crossing_ticks: int = 3
    approach_ticks: int = 2
    expiry_ticks: int = 5000

    def __post_init__(self):
        if not self.reversal_ticks > self.crossing_ticks > 0:
            raise ValueError("require reversal_ticks > crossing_ticks > 0")
        if self.approach_ticks < 1:
            raise ValueError("approach_ticks must be >= 1")
        if self.expiry_ticks < 1:
            raise ValueError("expiry_ticks must be >= 1")


def label_event(event: PatternEvent, batch: Batch, config: LabelConfig = LabelConfig()) -> PatternEvent:
    """Return a copy of ``event`` with its label and anchor indices filled in.

    The scan starts at the formation tick and covers at most ``expiry_ticks``
    ticks. The approach side is the side of the formation price; the trigger
    is the first tick within ``approach_ticks`` of the target on that side
    (or already through it), the touch is the first later tick at or through
    the target. From the touch on, ``reversal_ticks`` of movement back on the
    approach side before ``crossing_ticks`` beyond the target is Positive; the
    reverse order is Negative; a shallow cross followed by a full reversal is
    Excluded. Anything left open is Unresolved.
    """
    prices = batch.ticks.price_idx
    f = event.formation_tick_index
    if not 0 <= f < len(prices):
        raise IndexError(f"formation index {f} outside batch of {len(prices)} ticks")
    x = event.target_price_idx
    stop = min(len(prices), f + config.expiry_ticks + 1)
    out = replace(event, trigger_tick_index=None, touch_tick_index=None, resolve_tick_index=None,
                  approach_side=0, label=Label.UNRESOLVED, features=dict(event.features))
    s = int(np.sign(prices[f] - x))
    if s == 0:
        return out
    out.approach_side = s
    # signed distance from the target, positive on the approach side
    dist = (prices[f:stop] - x) * s

    armed = np.flatnonzero(dist <= config.approach_ticks)
    if armed.size == 0:
        return out
    out.trigger_tick_index = f + int(armed[0])
    touched = np.flatnonzero(dist[1:] <= 0)
    if touched.size == 0:
        return out
    t = 1 + int(touched[0])
    out.touch_tick_index = f + t

    after = dist[t:]
    rev = np.flatnonzero(after >= config.reversal_ticks)
    cross = np.flatnonzero(after <= -config.crossing_ticks)
    first_rev = int(rev[0]) if rev.size else None
    first_cross = int(cross[0]) if cross.size else None
    if first_cross is not None and (first_rev is None or first_cross < first_rev):
        out.label = Label.NEGATIVE
        out.resolve_tick_index = f + t + first_cross
    elif first_rev is not None:
        beyond = bool(np.any(after[:first_rev] < 0))
        out.label = Label.EXCLUDED if beyond else Label.POSITIVE
        out.resolve_tick_index = f + t + first_rev
    return out


def label_events(events: Iterable[PatternEvent], batch: Batch, config: LabelConfig = LabelConfig()):
    return [label_event(e, batch, config) for e in events]


def disposition_counts(events: Iterable[PatternEvent]) -> dict[str, int]:
    counts = Counter(e.label.value for e in events)
    return {lab.value: counts.get(lab.value, 0) for lab in Label}


def training_view(events: Iterable[PatternEvent]) -> list[PatternEvent]:
    """Positive and Negative events only."""
    events = list(events)
    kept = [e for e in events if e.label in (Label.POSITIVE, Label.NEGATIVE)]
    logger.debug("training view: %s -> %d rows", disposition_counts(events), len(kept))
    return kept


def test_view(events: Iterable[PatternEvent]) -> list[PatternEvent]:
    """Excluded events count as Negative; Unresolved events are dropped."""
    events = list(events)
    kept = []
    for e in events:
        if e.label is Label.UNRESOLVED:
            continue
        if e.label is Label.EXCLUDED:
            e = replace(e, label=Label.NEGATIVE, features=dict(e.features))
        kept.append(e)
    logger.debug("test view: %s -> %d rows", disposition_counts(events), len(kept))
    return kept


test_view.__test__ = False  # keep pytest from collecting it
