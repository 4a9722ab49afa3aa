"""Pattern (P0-P14) and Market Shift (MS0-MS3) features.

Ratio features with a zero denominator are ``MISSING`` (NaN in matrices).
Upper levels are ``X+1..X+5`` and lower levels ``X-5..X-1`` around the target
``X``. For price-level patterns only the approach side exists, so the index
``t=-k`` reads distance ``2k-1`` and ``t=+k`` reads distance ``2k`` from the
level on that side.

Table columns follow the equations, which name ask trades in P2 and bid
trades in P3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .market_data import Batch, TickArray
from .patterns import PatternEvent, PatternKind, Side, VolumeProfile

MISSING = float("nan")

PATTERN_FEATURES = (
    "P0", "P1", "P2", "P3", "P4", "P5", "P6", "P7", "P8", "P9", "P10", "P11",
    "P12_-1", "P12_0", "P12_+1", "P13_-1", "P13_0", "P13_+1", "P14",
)
MS_FEATURES = ("MS0", "MS1", "MS2", "MS3")
FEATURE_NAMES = PATTERN_FEATURES + MS_FEATURES


@dataclass(frozen=True)
class FeatureConfig:
    neighbourhood: int = 5
    long_window: int = 237
    short_window: int = 21
    # trailing ticks aggregated for price levels and for VCRB levels outside the buffer
    profile_window: int = 237

    def __post_init__(self):
        if self.neighbourhood < 1 or self.short_window < 1 or self.long_window < 1:
            raise ValueError("feature windows must be >= 1")
        if self.profile_window < 1:
            raise ValueError("profile_window must be >= 1")


def ratio(num: float, den: float) -> float:
    if den == 0:
        return MISSING
    value = num / den
    return value if math.isfinite(value) else MISSING


# Level lookup: t -> (V_b, V_a, T_b, T_a, n_ticks)
LevelFn = Callable[[int], tuple]


def _pattern_block(level: LevelFn, n: int) -> dict[str, float]:
    upper = np.array([level(t) for t in range(1, n + 1)], dtype=float).sum(axis=0)
    lower = np.array([level(-t) for t in range(1, n + 1)], dtype=float).sum(axis=0)
    poc = np.array(level(0), dtype=float)
    vb, va, tb, ta, cnt = 0, 1, 2, 3, 4
    out = {
        "P0": ratio(upper[vb], lower[vb]),
        "P1": ratio(upper[va], lower[va]),
        "P2": ratio(upper[ta], lower[ta]),
        "P3": ratio(upper[tb], lower[tb]),
        "P4": ratio(upper[vb], upper[cnt]),
        "P5": ratio(upper[va], upper[cnt]),
        "P6": ratio(lower[vb], lower[cnt]),
        "P7": ratio(lower[va], lower[cnt]),
        "P8": ratio(poc[vb], upper[vb]),
        "P9": ratio(poc[va], upper[va]),
        "P10": ratio(poc[vb], lower[vb]),
        "P11": ratio(poc[va], lower[va]),
    }
    for t, tag in ((-1, "-1"), (0, "0"), (1, "+1")):
        agg = level(t)
        out[f"P12_{tag}"] = ratio(agg[vb], agg[va])
        out[f"P13_{tag}"] = ratio(agg[tb], agg[ta])
    return out


def _window(ticks: TickArray, end_index: int, length: int) -> TickArray:
    return ticks[max(0, end_index - length + 1):end_index + 1]


def pattern_features_vcrb(event: PatternEvent, batch: Batch, config: FeatureConfig = FeatureConfig()):
    """P0..P14 for a VCRB from its buffer profile.

    Levels the buffer does not cover are aggregated from the trailing
    ``profile_window`` ticks ending at the formation tick.
    """
    if event.kind is not PatternKind.VCRB or event.profile is None:
        raise ValueError("pattern_features_vcrb needs a VCRB event with a profile")
    x = event.target_price_idx
    n = config.neighbourhood
    profile = event.profile
    outside = None
    if not (profile.covers(x - n) and profile.covers(x + n)):
        trail = _window(batch.ticks, event.formation_tick_index, config.profile_window)
        outside = VolumeProfile.from_ticks(trail, x - n, x + n) if len(trail) else None

    def level(t):
        p = x + t
        if profile.covers(p):
            return profile.level(p)
        return outside.level(p) if outside is not None else (0, 0, 0, 0, 0)

    out = _pattern_block(level, n)
    out["P14"] = 1.0 if event.side is Side.TARGET_ABOVE else 0.0
    return out


def pattern_features_price_level(event: PatternEvent, batch: Batch, config: FeatureConfig = FeatureConfig()):
    """P0..P14 for a price level using one-sided, odd/even remapped distances."""
    if event.kind is not PatternKind.PRICE_LEVEL:
        raise ValueError("pattern_features_price_level needs a PriceLevel event")
    x = event.target_price_idx
    n = config.neighbourhood
    # approach side: below a resistance, above a support
    toward = -1 if event.side is Side.TARGET_ABOVE else 1
    trail = _window(batch.ticks, event.formation_tick_index, config.profile_window)
    lo, hi = sorted((x, x + toward * 2 * n))
    prof = VolumeProfile.from_ticks(trail, lo, hi) if len(trail) else None

    def level(t):
        dist = 0 if t == 0 else (2 * (-t) - 1 if t < 0 else 2 * t)
        return prof.level(x + toward * dist) if prof is not None else (0, 0, 0, 0, 0)

    out = _pattern_block(level, n)
    out["P14"] = 1.0 if event.side is Side.TARGET_ABOVE else 0.0
    return out


def market_shift_features(batch: Batch, trigger_tick_index: int | None,
                          long_window: int = 237, short_window: int = 21) -> dict[str, float]:
    """Trailing bid/ask flow ratios ending at (and including) the trigger tick."""
    missing = {k: MISSING for k in MS_FEATURES}
    if trigger_tick_index is None or trigger_tick_index + 1 < long_window:
        return missing
    t = batch.ticks
    lo_long = trigger_tick_index - long_window + 1
    lo_short = trigger_tick_index - short_window + 1
    sl_long = slice(lo_long, trigger_tick_index + 1)
    sl_short = slice(lo_short, trigger_tick_index + 1)
    vol_long = ratio(float(t.bid_volume[sl_long].sum()), float(t.ask_volume[sl_long].sum()))
    trd_long = ratio(float(t.bid_trades[sl_long].sum()), float(t.ask_trades[sl_long].sum()))
    vol_short = ratio(float(t.bid_volume[sl_short].sum()), float(t.ask_volume[sl_short].sum()))
    trd_short = ratio(float(t.bid_trades[sl_short].sum()), float(t.ask_trades[sl_short].sum()))
    return {
        "MS0": vol_long,
        "MS1": trd_long,
        "MS2": vol_long - vol_short,
        "MS3": trd_long - trd_short,
    }


def compute_features(event: PatternEvent, batch: Batch, config: FeatureConfig = FeatureConfig()) -> dict:
    if event.kind is PatternKind.VCRB:
        feats = pattern_features_vcrb(event, batch, config)
    else:
        feats = pattern_features_price_level(event, batch, config)
    feats.update(market_shift_features(batch, event.trigger_tick_index, config.long_window,
                                       config.short_window))
    return feats


def attach_features(events: Iterable[PatternEvent], batch: Batch, config: FeatureConfig = FeatureConfig()):
    out = []
    for e in events:
        e.features = compute_features(e, batch, config)
        out.append(e)
    return out


def feature_matrix(events: Sequence[PatternEvent], names: Sequence[str] = FEATURE_NAMES) -> np.ndarray:
    return np.array([[e.features.get(k, MISSING) for k in names] for e in events], dtype=float).reshape(
        len(events), len(names))


MISSING_TOKEN = "NA"


def write_feature_table(path, rows: np.ndarray, names: Sequence[str], labels=None, keys=None) -> None:
    """Tab-separated events x features table; missing values written as ``NA``."""
    with open(path, "w", encoding="utf-8") as fh:
        head = list(keys[0].keys()) if keys else []
        fh.write("\t".join(head + list(names) + (["label"] if labels is not None else [])) + "\n")
        for i, row in enumerate(rows):
            cells = [str(v) for v in keys[i].values()] if keys else []
            cells += [MISSING_TOKEN if np.isnan(v) else repr(float(v)) for v in row]
            if labels is not None:
                cells.append(str(int(labels[i])))
            fh.write("\t".join(cells) + "\n")


def read_feature_table(path, names: Sequence[str] | None = None):
    """Return (key columns dict, feature matrix, feature names, labels or None)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        lines = [ln.rstrip("\n").split("\t") for ln in fh if ln.strip()]
    has_label = header[-1] == "label"
    feat_names = list(names) if names is not None else [h for h in header if h in FEATURE_NAMES]
    key_cols = [h for h in header if h not in FEATURE_NAMES and h != "label"]
    pos = {h: i for i, h in enumerate(header)}
    X = np.array([[MISSING if ln[pos[k]] == MISSING_TOKEN else float(ln[pos[k]]) for k in feat_names]
                  for ln in lines], dtype=float).reshape(len(lines), len(feat_names))
    keys = {k: [ln[pos[k]] for ln in lines] for k in key_cols}
    y = np.array([int(ln[-1]) for ln in lines], dtype=int) if has_label else None
    return keys, X, feat_names, y
