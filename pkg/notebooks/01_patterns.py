"""
Synthetic ticks, range bars and labels
======================================

Generate a tick stream, cut it into quarterly batches, extract volume-centred
range bars plus price levels, and label what happened at each target.
"""

from collections import Counter

import numpy as np

from vcrb_lab.labeling import disposition_counts, label_events
from vcrb_lab.market_data import SyntheticConfig, generate_synthetic, split_batches
from vcrb_lab.patterns import extract_price_levels, extract_vcrb

# 40k ticks, one every 1000 s: a bit over a year of "trading"
cfg = SyntheticConfig(n_ticks=40_000, tick_interval_ms=1_000_000, signal_delta=0.2)
ticks, episodes = generate_synthetic(0, cfg, return_episodes=True)
print(len(ticks), "ticks,", len(episodes), "planted episodes")
print(Counter(e.outcome for e in episodes))

batches = split_batches(ticks)
for b in batches:
    print(f"{b.label:>16}  {len(b):6d} ticks")

###############################################################################
# Range bars. A bar of range R closes when its buffer spans R levels and
# its volume peak sits exactly on the centre level.

b = batches[0]
for r in (5, 7, 9, 11):
    ev = extract_vcrb(b, r)
    print(f"range {r:2d}: {len(ev):5d} bars")

bar = extract_vcrb(b, 7)[0]
print("first bar: target", bar.target_price_idx, "ticks", bar.first_tick_index, "->", bar.formation_tick_index)
print("volume by level:", bar.profile.total_volume.tolist())

###############################################################################
# Labels: approach within 2 ticks, touch, then reversal by 15 (Positive) or
# crossing by 3 (Negative). Shallow crosses that still reverse are Excluded.

labelled = label_events(extract_vcrb(b, 7), b)
print(disposition_counts(labelled))

levels = label_events(extract_price_levels(b), b)
print("price levels:", disposition_counts(levels))

# share of resolved bars that reversed
resolved = [e for e in labelled if e.label.value in ("Positive", "Negative")]
print("reversal rate", np.mean([e.label.value == "Positive" for e in resolved]).round(3))
