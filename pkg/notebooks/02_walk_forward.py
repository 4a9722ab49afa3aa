"""
Features, boosted trees and walk-forward precision
==================================================

Turn labelled bars into feature rows, fit the boosted trees batch by batch,
and compare out-of-sample precision with the always-positive baseline.
"""

import numpy as np

from vcrb_lab.boosting import Dataset, TreeParams, feature_importance
from vcrb_lab.features import FEATURE_NAMES, attach_features, feature_matrix
from vcrb_lab.labeling import label_events, test_view, training_view
from vcrb_lab.market_data import SyntheticConfig, generate_synthetic, split_batches
from vcrb_lab.model_selection import TuningSpec, walk_forward
from vcrb_lab.patterns import Label, extract_vcrb
from vcrb_lab.stats import PairedSample, hedges_g_av, wilcoxon_one_sided

cfg = SyntheticConfig(n_ticks=96_000, tick_interval_ms=1_000_000, signal_delta=0.2)
batches = split_batches(generate_synthetic(0, cfg))[:12]


def dataset(events):
    y = np.array([e.label is Label.POSITIVE for e in events])
    return Dataset(feature_matrix(events), y, FEATURE_NAMES)


rows = []
for b in batches:
    ev = attach_features(label_events(extract_vcrb(b, 7), b), b)
    rows.append((b.label, dataset(training_view(ev)), dataset(test_view(ev))))
    print(f"{b.label:>16}  train {len(rows[-1][1]):4d}  test {len(rows[-1][2]):4d}")

# missing ratios stay NaN; the trees learn where they go
X = rows[0][1].X
share = np.isnan(X).mean(axis=0)
print("missing share:", {n: round(float(v), 2) for n, v in zip(FEATURE_NAMES, share) if v > 0})

###############################################################################
# Walk forward: eliminate features and tune on batch N, score batch N+1.

spec = TuningSpec(iterations=(50,), max_depth=(2, 3), l2_regularization=(3.0,), has_time=(True, False))
res = walk_forward(rows, spec, rfe_params=TreeParams(iterations=30, max_depth=2))
for p in res.pairs:
    m = p.metrics
    print(f"{p.test_batch:>16}  precision {m.precision:.3f}  baseline {m.null_precision:.3f}  "
          f"PR-AUC {m.pr_auc:.3f}  features {len(p.selected_features)}")

imp = feature_importance(res.pairs[-1].model)
print("top features:", sorted(imp, key=imp.get, reverse=True)[:5])

###############################################################################
# Paired comparison over batches

s = PairedSample([p.test_batch for p in res.pairs], [p.metrics.precision for p in res.pairs],
                 [p.metrics.null_precision for p in res.pairs])
print(hedges_g_av(s))
print(wilcoxon_one_sided(s))
