"""Decision-path and Shapley interaction matrices, rankings and Footrule relatedness."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .boosting import Dataset, GBDTModel, Tree


@dataclass(frozen=True)
class Condition:
    feature_id: int
    threshold: float
    goes_left: bool  # True: x <= threshold branch
    missing_left: bool

    def holds(self, x: np.ndarray) -> np.ndarray:
        left = np.where(np.isnan(x), self.missing_left, x <= self.threshold)
        return left if self.goes_left else ~left


@dataclass(frozen=True)
class DecisionPath:
    conditions: tuple[Condition, ...]
    contribution: float  # leaf value x learning rate
    support: float  # fraction of rows reaching the leaf
    tree_index: int
    leaf_id: int

    @property
    def feature_set(self) -> frozenset[int]:
        return frozenset(c.feature_id for c in self.conditions)


@dataclass(frozen=True)
class InteractionMatrix:
    feature_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if v.shape != (len(self.feature_names),) * 2:
            raise ValueError("matrix shape does not match feature names")

    def __getitem__(self, pair):
        i, j = (self.feature_names.index(p) if isinstance(p, str) else p for p in pair)
        return float(self.values[i, j])

    def restrict(self, names: Sequence[str]) -> "InteractionMatrix":
        idx = [self.feature_names.index(n) for n in names]
        return InteractionMatrix(tuple(names), self.values[np.ix_(idx, idx)])


# --------------------------------------------------------------------------- decision paths


def _leaf_paths(tree: Tree) -> list[tuple[int, tuple[Condition, ...]]]:
    out = []
    stack = [(0, ())]
    while stack:
        node, conds = stack.pop()
        f = int(tree.feature[node])
        if f < 0:
            out.append((node, conds))
            continue
        thr, ml = float(tree.threshold[node]), bool(tree.missing_left[node])
        stack.append((int(tree.right[node]), conds + (Condition(f, thr, False, ml),)))
        stack.append((int(tree.left[node]), conds + (Condition(f, thr, True, ml),)))
    return sorted(out)


def extract_paths(model: GBDTModel, rows=None) -> list[DecisionPath]:
    """One path per leaf of every tree.

    Support is the share of ``rows`` reaching the leaf; without rows it falls
    back to the node covers recorded at training time.
    """
    if not model.trees:
        raise ValueError("model has no trees")
    X = None
    if rows is not None:
        X = rows.select(model.feature_names).X if isinstance(rows, Dataset) else np.asarray(rows, dtype=float)
    paths = []
    for ti, tree in enumerate(model.trees):
        if X is not None:
            counts = np.bincount(tree.apply(X), minlength=tree.n_nodes)
            total = len(X)
        else:
            counts = tree.cover
            total = int(tree.cover[0])
        for leaf, conds in _leaf_paths(tree):
            w = counts[leaf] / total if total else 0.0
            paths.append(DecisionPath(conds, float(tree.value[leaf]) * model.learning_rate, float(w), ti, leaf))
    return paths


def _accumulate(paths: Sequence[DecisionPath], n_features: int, order: int | None) -> np.ndarray:
    sums = np.zeros((n_features, n_features))
    counts = np.zeros((n_features, n_features))
    for p in paths:
        fs = sorted(p.feature_set)
        if order is not None and len(fs) != order:
            continue
        term = p.contribution * p.support
        if len(fs) == 1:
            sums[fs[0], fs[0]] += term
            counts[fs[0], fs[0]] += 1
        for a, b in itertools.combinations(fs, 2):
            sums[a, b] += term
            sums[b, a] += term
            counts[a, b] += 1
            counts[b, a] += 1
    return np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)


def interaction_matrix(paths: Sequence[DecisionPath], feature_names: Sequence[str]) -> InteractionMatrix:
    """Mean of ``c * w`` over the paths containing each feature pair.

    Single-feature paths fill the diagonal. A path with three or more
    features adds its term to every pair it contains. Pairs no path
    contains are 0.
    """
    if not paths:
        raise ValueError("no decision paths")
    return InteractionMatrix(tuple(feature_names), _accumulate(paths, len(feature_names), None))


def order_k_interactions(paths: Sequence[DecisionPath], feature_names: Sequence[str], k: int) -> InteractionMatrix:
    """Same average restricted to paths with exactly ``k`` distinct features."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return InteractionMatrix(tuple(feature_names), _accumulate(paths, len(feature_names), k))


# --------------------------------------------------------------------------- Shapley interactions


@lru_cache(maxsize=None)
def _shapley_weights(k: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Linear map from the ``2**k`` coalition values of a ``k``-player game to
    ``k`` Shapley values followed by the pairwise interaction indices."""
    pairs = list(itertools.combinations(range(k), 2))
    W = np.zeros((1 << k, k + len(pairs)))
    sizes = [bin(s).count("1") for s in range(1 << k)]
    fact = math.factorial
    for i in range(k):
        bit = 1 << i
        for s in range(1 << k):
            if s & bit:
                continue
            w = fact(sizes[s]) * fact(k - sizes[s] - 1) / fact(k)
            W[s | bit, i] += w
            W[s, i] -= w
    for col, (i, j) in enumerate(pairs, start=k):
        bi, bj = 1 << i, 1 << j
        for s in range(1 << k):
            if s & (bi | bj):
                continue
            w = fact(sizes[s]) * fact(k - sizes[s] - 2) / (2 * fact(k - 1))
            W[s | bi | bj, col] += w
            W[s | bi, col] -= w
            W[s | bj, col] -= w
            W[s, col] += w
    return W, pairs


def _subset_products(ind: np.ndarray) -> np.ndarray:
    """``out[:, s]`` = product of the indicator columns named by the bits of ``s``."""
    n, k = ind.shape
    out = np.ones((n, 1 << k))
    for f in range(k):
        bit = 1 << f
        cols = [s for s in range(1 << k) if s & bit]
        out[:, cols] *= ind[:, f:f + 1]
    return out


def shapley_interaction_values(model: GBDTModel, background, explain, max_features: int = 15) -> np.ndarray:
    """Exact interventional Shapley interaction values, one ``M x M`` matrix per explained row.

    The value of a coalition S is the mean margin over background rows with
    the features in S taken from the explained row. Off-diagonal entries are
    the pairwise interaction indices, split evenly between (i, j) and (j, i).
    The diagonal holds each feature's Shapley value minus its interactions,
    so every matrix sums to the margin minus the mean background margin.

    The game is additive over leaves, and a leaf only depends on the features
    on its path, so every leaf is solved as a small game over those features.
    """
    used = model.used_features()
    if len(used) > max_features:
        raise ValueError(f"model uses {len(used)} features, more than max_features={max_features}; "
                         "subsample features or refit on fewer")
    Xe = np.atleast_2d(np.asarray(explain.select(model.feature_names).X if isinstance(explain, Dataset)
                                  else explain, dtype=float))
    Xb = np.atleast_2d(np.asarray(background.select(model.feature_names).X if isinstance(background, Dataset)
                                  else background, dtype=float))
    if len(Xb) == 0:
        raise ValueError("empty background")
    M = len(model.feature_names)
    out = np.zeros((len(Xe), M, M))
    for tree in model.trees:
        for leaf, conds in _leaf_paths(tree):
            feats = sorted({c.feature_id for c in conds})
            k = len(feats)
            if k == 0:
                continue
            pos = {f: a for a, f in enumerate(feats)}
            ie = np.ones((len(Xe), k))
            ib = np.ones((len(Xb), k))
            for c in conds:
                a = pos[c.feature_id]
                ie[:, a] *= c.holds(Xe[:, c.feature_id])
                ib[:, a] *= c.holds(Xb[:, c.feature_id])
            full = (1 << k) - 1
            # background part: features outside the coalition, jointly over background rows
            bg = _subset_products(ib).mean(axis=0)
            v = _subset_products(ie) * bg[full ^ np.arange(1 << k)]
            v *= float(tree.value[leaf]) * model.learning_rate
            W, pairs = _shapley_weights(k)
            res = v @ W
            phi = res[:, :k]
            diag = phi.copy()
            for col, (a, b) in enumerate(pairs, start=k):
                fa, fb = feats[a], feats[b]
                out[:, fa, fb] += res[:, col]
                out[:, fb, fa] += res[:, col]
                diag[:, a] -= res[:, col]
                diag[:, b] -= res[:, col]
            for a, f in enumerate(feats):
                out[:, f, f] += diag[:, a]
    return out


def shapley_interactions(model: GBDTModel, background, explain, max_features: int = 15) -> InteractionMatrix:
    """Global matrix: element-wise mean of the absolute per-row matrices."""
    per_row = shapley_interaction_values(model, background, explain, max_features)
    return InteractionMatrix(model.feature_names, np.abs(per_row).mean(axis=0))


# --------------------------------------------------------------------------- ranking and relatedness


def upper_elements(matrix) -> np.ndarray:
    """Upper triangle including the diagonal, row-major."""
    v = matrix.values if isinstance(matrix, InteractionMatrix) else np.asarray(matrix, dtype=float)
    return v[np.triu_indices(len(v))]


def rank_elements(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n by descending absolute value; ties keep element order."""
    order = np.argsort(-np.abs(np.asarray(values, dtype=float)), kind="stable")
    ranks = np.empty(len(order), dtype=np.int64)
    ranks[order] = np.arange(1, len(order) + 1)
    return ranks


def rank_matrix(matrix) -> np.ndarray:
    return rank_elements(upper_elements(matrix))


def footrule(a, b) -> int:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("rankings differ in length")
    return int(np.abs(a - b).sum())


def max_footrule(n: int) -> int:
    return n * n // 2


@dataclass(frozen=True)
class BootstrapNull:
    mean: float
    distances: np.ndarray

    @property
    def standard_error(self) -> float:
        return float(np.std(self.distances, ddof=1) / math.sqrt(len(self.distances)))


def bootstrap_null(matrix_a, matrix_b, n_boot: int = 500, seed: int = 0) -> BootstrapNull:
    """Footrule distances between independently resampled matrices.

    Each matrix's unique elements are resampled with replacement
    ``n_boot`` times. Sample ``i`` of A is ranked and compared with sample
    ``i`` of B.
    """
    ea, eb = upper_elements(matrix_a), upper_elements(matrix_b)
    if ea.shape != eb.shape:
        raise ValueError("matrices differ in size")
    rng = np.random.default_rng(seed)
    sa = ea[rng.integers(0, len(ea), size=(n_boot, len(ea)))]
    sb = eb[rng.integers(0, len(eb), size=(n_boot, len(eb)))]
    d = np.array([footrule(rank_elements(x), rank_elements(y)) for x, y in zip(sa, sb)], dtype=float)
    return BootstrapNull(float(d.mean()), d)


# --------------------------------------------------------------------------- text tables


def write_matrix(path, matrix: InteractionMatrix) -> None:
    names = matrix.feature_names
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("feature\t" + "\t".join(names) + "\n")
        for name, row in zip(names, matrix.values):
            fh.write(name + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


def read_matrix(path) -> InteractionMatrix:
    with open(path, encoding="utf-8") as fh:
        names = fh.readline().rstrip("\n").split("\t")[1:]
        rows = [ln.rstrip("\n").split("\t")[1:] for ln in fh if ln.strip()]
    return InteractionMatrix(tuple(names), np.array(rows, dtype=float).reshape(len(names), len(names)))


def write_ranks(path, matrix: InteractionMatrix, ranks: np.ndarray) -> None:
    names = matrix.feature_names
    iu = np.triu_indices(len(names))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("feature_a\tfeature_b\tvalue\trank\n")
        for i, j, r in zip(iu[0], iu[1], ranks):
            fh.write(f"{names[i]}\t{names[j]}\t{float(matrix.values[i, j])!r}\t{int(r)}\n")
