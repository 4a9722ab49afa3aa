"""Binary gradient-boosted decision trees on logistic loss.

Plain depth-limited binary trees with exact greedy splits on second-order
statistics. Missing values (NaN) follow a per-node default direction learned
during training. Models serialize to a JSON document that the
explainability code reads back.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)

MODEL_FORMAT = "vcrb-lab-gbdt"
MODEL_VERSION = 1


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...]
    chronological: bool = True

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            X = X.reshape(len(X), -1)
        y = np.asarray(self.y, dtype=int).reshape(-1)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if len(X) != len(y):
            raise ValueError(f"row count {len(X)} != label count {len(y)}")
        if X.shape[1] != len(self.feature_names):
            raise ValueError("feature name count does not match matrix width")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ValueError("feature names must be unique")

    def __len__(self) -> int:
        return len(self.y)

    def select(self, names: Sequence[str]) -> "Dataset":
        idx = [self.feature_names.index(n) for n in names]
        return replace(self, X=self.X[:, idx], feature_names=tuple(names))

    def rows(self, idx) -> "Dataset":
        return replace(self, X=self.X[idx], y=self.y[idx])

    @property
    def prevalence(self) -> float:
        return float(self.y.mean()) if len(self.y) else float("nan")


@dataclass(frozen=True)
class TreeParams:
    iterations: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    l2_regularization: float = 3.0
    has_time: bool = True
    min_samples_leaf: int = 5
    min_child_weight: float = 1e-3
    subsample: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.max_depth < 1:
            raise ValueError("iterations must be >= 0 and max_depth >= 1")
        if self.learning_rate <= 0 or self.l2_regularization < 0:
            raise ValueError("learning_rate must be > 0 and l2_regularization >= 0")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")


@dataclass
class Tree:
    """Array-backed binary tree. ``feature[k] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for k in range(self.n_nodes):
            if self.feature[k] >= 0:
                depth[self.left[k]] = depth[k] + 1
                depth[self.right[k]] = depth[k] + 1
        return int(depth.max())

    def go_left(self, node: int, x: np.ndarray) -> np.ndarray:
        """Routing decision of one internal node for a vector of feature values."""
        return np.where(np.isnan(x), bool(self.missing_left[node]), x <= self.threshold[node])

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        for _ in range(self.depth):
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            x = X[rows, np.where(internal, feat, 0)]
            left = np.where(np.isnan(x), self.missing_left[node], x <= self.threshold[node])
            node = np.where(internal, np.where(left, self.left[node], self.right[node]), node)
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        nodes = []
        for k in range(self.n_nodes):
            node = {"id": k, "value": float(self.value[k]), "cover": int(self.cover[k])}
            if self.feature[k] >= 0:
                node.update(feature=int(self.feature[k]), threshold=float(self.threshold[k]),
                            missing="left" if self.missing_left[k] else "right",
                            left=int(self.left[k]), right=int(self.right[k]), gain=float(self.gain[k]))
            nodes.append(node)
        return {"nodes": nodes}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Tree":
        nodes = sorted(d["nodes"], key=lambda n: n["id"])
        if [n["id"] for n in nodes] != list(range(len(nodes))):
            raise ValueError("tree node ids must be 0..n-1")
        feat = np.array([n.get("feature", -1) for n in nodes], dtype=np.int64)
        return cls(
            feature=feat,
            threshold=np.array([n.get("threshold", np.nan) for n in nodes], dtype=float),
            missing_left=np.array([n.get("missing", "left") == "left" for n in nodes], dtype=bool),
            left=np.array([n.get("left", -1) for n in nodes], dtype=np.int64),
            right=np.array([n.get("right", -1) for n in nodes], dtype=np.int64),
            value=np.array([n.get("value", 0.0) for n in nodes], dtype=float),
            cover=np.array([n.get("cover", 0) for n in nodes], dtype=np.int64),
            gain=np.array([n.get("gain", 0.0) for n in nodes], dtype=float),
        )


@dataclass
class GBDTModel:
    base_score: float
    learning_rate: float
    trees: list[Tree]
    feature_names: tuple[str, ...]
    n_rows: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.feature_names = tuple(self.feature_names)
        for t in self.trees:
            used = t.feature[t.feature >= 0]
            if used.size and used.max() >= len(self.feature_names):
                raise ValueError("tree references a feature outside the model feature set")

    def margin(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.full(len(X), self.base_score, dtype=float)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out

    def used_features(self) -> list[int]:
        used = set()
        for t in self.trees:
            used.update(int(f) for f in t.feature[t.feature >= 0])
        return sorted(used)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "base_score": float(self.base_score),
            "learning_rate": float(self.learning_rate),
            "feature_names": list(self.feature_names),
            "n_rows": int(self.n_rows),
            "params": dict(self.params),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GBDTModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a {MODEL_FORMAT} document")
        return cls(base_score=float(d["base_score"]), learning_rate=float(d["learning_rate"]),
                   trees=[Tree.from_dict(t) for t in d["trees"]], feature_names=tuple(d["feature_names"]),
                   n_rows=int(d.get("n_rows", 0)), params=dict(d.get("params", {})))


def save_model(model: GBDTModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path) -> GBDTModel:
    return GBDTModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------- training


@njit(cache=True)
def _scan_splits(order, xs, in_node, g, h, G, H, C, lam, min_leaf, min_cw):
    """Best (gain, feature, position, missing_left, n_missing) over all features.

    ``order[f]`` lists rows sorted by feature ``f`` (NaN last) and ``xs[f]`` the
    matching values. Ties keep the first candidate in (feature, position,
    missing-right-before-left) order.
    """
    n_feat, n = order.shape
    best_gain = 0.0
    best_f = -1
    best_k = -1
    best_ml = False
    best_nm = 0
    parent = G * G / (H + lam)
    for f in range(n_feat):
        gv = 0.0
        hv = 0.0
        cv = 0
        for k in range(n):
            r = order[f, k]
            if in_node[r] and not np.isnan(xs[f, k]):
                gv += g[r]
                hv += h[r]
                cv += 1
        gm = G - gv
        hm = H - hv
        cm = C - cv
        gl = 0.0
        hl = 0.0
        cl = 0
        prev_k = -1
        for k in range(n):
            r = order[f, k]
            if not in_node[r]:
                continue
            v = xs[f, k]
            if np.isnan(v):
                break
            if prev_k >= 0 and v > xs[f, prev_k]:
                for ml in range(2):
                    if ml == 0:
                        GL = gl
                        HL = hl
                        CL = cl
                    else:
                        GL = gl + gm
                        HL = hl + hm
                        CL = cl + cm
                    GR = G - GL
                    HR = H - HL
                    CR = C - CL
                    if CL < min_leaf or CR < min_leaf or HL < min_cw or HR < min_cw:
                        continue
                    gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent)
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_k = prev_k
                        best_ml = ml == 1
                        best_nm = cm
            gl += g[r]
            hl += h[r]
            cl += 1
            prev_k = k
    return best_gain, best_f, best_k, best_ml, best_nm


class _SplitFinder:
    """Exact greedy split search over presorted feature columns."""

    def __init__(self, X: np.ndarray, params: TreeParams):
        self.X = X
        self.params = params
        self.order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)  # (F, n), NaN last
        self.xs = np.ascontiguousarray(np.take_along_axis(X.T, self.order, axis=1))

    def best(self, in_node: np.ndarray, g: np.ndarray, h: np.ndarray, G: float, H: float):
        p = self.params
        gain, f, k, miss_left, n_missing = _scan_splits(
            self.order, self.xs, in_node, g, h, G, H, int(in_node.sum()), float(p.l2_regularization),
            int(p.min_samples_leaf), float(p.min_child_weight))
        if f < 0:
            return None
        lo = self.xs[f, k]
        # next distinct value of this feature inside the node
        rows = self.order[f, k + 1:]
        nxt = self.xs[f, k + 1:][in_node[rows]]
        hi = nxt[0]
        thr = 0.5 * (lo + hi)
        if not lo <= thr < hi:
            thr = lo
        return float(gain), int(f), float(thr), bool(miss_left), int(n_missing)


def _build_tree(finder: _SplitFinder, g: np.ndarray, h: np.ndarray, rows: np.ndarray, params: TreeParams) -> Tree:
    lam = params.l2_regularization
    X = finder.X
    feature, threshold, missing_left, left, right, value, cover, gain = ([] for _ in range(8))

    def new_node(mask):
        G, H = float(g[mask].sum()), float(h[mask].sum())
        feature.append(-1)
        threshold.append(np.nan)
        missing_left.append(True)
        left.append(-1)
        right.append(-1)
        value.append(-G / (H + lam))
        cover.append(int(mask.sum()))
        gain.append(0.0)
        return len(feature) - 1, G, H

    root, G0, H0 = new_node(rows)
    stack = [(root, rows, 0, G0, H0)]
    while stack:
        k, mask, depth, G, H = stack.pop()
        if depth >= params.max_depth or cover[k] < 2 * params.min_samples_leaf:
            continue
        split = finder.best(mask, g, h, G, H)
        if split is None:
            continue
        sgain, f, thr, miss_left, n_missing = split
        x = X[:, f]
        goes_left = np.where(np.isnan(x), miss_left, x <= thr)
        lmask, rmask = mask & goes_left, mask & ~goes_left
        if n_missing == 0:
            # unseen missing values follow the heavier child
            miss_left = bool(lmask.sum() >= rmask.sum())
        feature[k], threshold[k], missing_left[k], gain[k] = f, thr, miss_left, sgain
        lk, GL, HL = new_node(lmask)
        rk, GR, HR = new_node(rmask)
        left[k], right[k] = lk, rk
        stack.append((rk, rmask, depth + 1, GR, HR))
        stack.append((lk, lmask, depth + 1, GL, HL))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
                np.array(missing_left, dtype=bool), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), np.array(value, dtype=float),
                np.array(cover, dtype=np.int64), np.array(gain, dtype=float))


def train(dataset: Dataset, params: TreeParams = TreeParams()) -> GBDTModel:
    """Fit a boosted ensemble; deterministic for a fixed ``params.seed``.

    With ``has_time`` the rows keep their chronological order and every tree
    sees all of them. Without it, rows are shuffled once with the seed and
    each tree is fit on a seeded ``subsample`` of them.
    """
    if len(dataset) < 2:
        raise ValueError("need at least 2 rows to train")
    if dataset.X.shape[1] == 0:
        raise ValueError("empty feature set")
    classes = np.unique(dataset.y)
    if len(classes) < 2:
        raise ValueError("training data contains a single class")
    rng = np.random.default_rng(params.seed)
    X, y = dataset.X, dataset.y.astype(float)
    if not params.has_time:
        perm = rng.permutation(len(y))
        X, y = X[perm], y[perm]
    prior = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
    base = float(np.log(prior / (1 - prior)))
    margin = np.full(len(y), base)
    finder = _SplitFinder(X, params)
    trees = []
    all_rows = np.ones(len(y), dtype=bool)
    for _ in range(params.iterations):
        p = sigmoid(margin)
        g, h = p - y, p * (1 - p)
        rows = all_rows
        if not params.has_time and params.subsample < 1:
            rows = rng.random(len(y)) < params.subsample
            if rows.sum() < 2:
                rows = all_rows
        tree = _build_tree(finder, g, h, rows, params)
        trees.append(tree)
        margin += params.learning_rate * tree.predict(X)
    return GBDTModel(base_score=base, learning_rate=params.learning_rate, trees=trees,
                     feature_names=dataset.feature_names, n_rows=len(y), params=asdict(params))


def _as_matrix(model: GBDTModel, rows) -> np.ndarray:
    if isinstance(rows, Dataset):
        missing = [n for n in model.feature_names if n not in rows.feature_names]
        if missing:
            raise KeyError(f"unknown feature(s) for model: {missing}")
        return rows.select(model.feature_names).X
    if isinstance(rows, Mapping):
        missing = [n for n in model.feature_names if n not in rows]
        if missing:
            raise KeyError(f"unknown feature(s) for model: {missing}")
        return np.column_stack([np.asarray(rows[n], dtype=float) for n in model.feature_names])
    X = np.asarray(rows, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != len(model.feature_names):
        raise ValueError(f"expected {len(model.feature_names)} feature columns, got {X.shape[1]}")
    return X


def predict_margin(model: GBDTModel, rows) -> np.ndarray:
    return model.margin(_as_matrix(model, rows))


def predict_proba(model: GBDTModel, rows) -> np.ndarray:
    """Positive-class probabilities, kept strictly inside (0, 1)."""
    p = sigmoid(predict_margin(model, rows))
    eps = np.finfo(float).eps
    return np.clip(p, eps, 1 - eps)


def feature_importance(model: GBDTModel, dataset: Dataset | None = None) -> dict[str, float]:
    """Total split gain per feature, normalized to sum to one.

    ``dataset`` is accepted for interface symmetry; gains are recorded at
    training time. A model without splits scores every feature zero.
    """
    totals = np.zeros(len(model.feature_names))
    for t in model.trees:
        internal = t.feature >= 0
        np.add.at(totals, t.feature[internal], t.gain[internal])
    s = totals.sum()
    if s > 0:
        totals = totals / s
    return dict(zip(model.feature_names, totals.tolist()))
