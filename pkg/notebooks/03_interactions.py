"""
Decision-path and Shapley interaction matrices
==============================================

Compare the two views of feature interactions on a fitted model, then ask
whether their rankings agree more than chance.
"""

import numpy as np

from vcrb_lab.boosting import Dataset, TreeParams, train
from vcrb_lab.explain import (bootstrap_null, extract_paths, footrule, interaction_matrix, order_k_interactions,
                              rank_matrix, shapley_interactions)

# a toy target with one main effect and one interaction
rng = np.random.default_rng(0)
X = rng.normal(size=(600, 5))
logit = 1.5 * X[:, 0] + 2.0 * (X[:, 1] > 0) * (X[:, 2] > 0) - 1.0
y = (rng.random(600) < 1 / (1 + np.exp(-logit))).astype(int)
names = ("a", "b", "c", "d", "e")
ds = Dataset(X, y, names)
model = train(ds, TreeParams(iterations=60, max_depth=3))

###############################################################################
# Decision paths: each leaf is a path with a contribution and a support.

paths = extract_paths(model, ds)
print(len(paths), "paths; feature counts:", np.bincount([len(p.feature_set) for p in paths]))
dp = interaction_matrix(paths, names)
print(np.round(dp.values, 4))

# second-order interactions only
print(np.round(order_k_interactions(paths, names, 2).values, 4))

###############################################################################
# Exact Shapley interactions over a background sample

sh = shapley_interactions(model, ds.rows(slice(0, 100)), ds.rows(slice(100, 200)))
print(np.round(sh.values, 4))

###############################################################################
# Rank agreement against a bootstrap null. Path terms are signed and the two
# children of a split often cancel, so small distances are not guaranteed.

d = footrule(rank_matrix(dp), rank_matrix(sh))
null = bootstrap_null(dp, sh, n_boot=500, seed=0)
print(f"Footrule {d}  vs null mean {null.mean:.1f} (SE {null.standard_error:.2f})")
