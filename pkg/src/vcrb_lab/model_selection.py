"""Chronological cross-validation, feature elimination, grid tuning and walk-forward evaluation."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .boosting import Dataset, GBDTModel, TreeParams, feature_importance, predict_proba, train
from .stats import MetricsRecord, classification_metrics

logger = logging.getLogger(__name__)

THRESHOLD = 0.5


def time_series_folds(n_rows: int, n_folds: int = 3) -> list[tuple[np.ndarray, np.ndarray]]:
    """Expanding-window splits: the rows are cut into ``n_folds + 1`` contiguous
    blocks and fold ``k`` trains on blocks ``0..k`` and tests on block ``k+1``."""
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    if n_rows < n_folds + 1:
        raise ValueError(f"{n_rows} rows cannot form {n_folds} chronological folds")
    edges = np.linspace(0, n_rows, n_folds + 2).round().astype(int)
    return [(np.arange(0, edges[k + 1]), np.arange(edges[k + 1], edges[k + 2])) for k in range(n_folds)]


def _fold_precision(dataset: Dataset, train_idx, test_idx, params: TreeParams) -> float:
    tr, te = dataset.rows(train_idx), dataset.rows(test_idx)
    if len(np.unique(tr.y)) < 2:
        logger.warning("degenerate fold: training block has a single class; scored 0")
        return 0.0
    if te.y.sum() == 0:
        logger.warning("degenerate fold: test block has no positives; scored 0")
        return 0.0
    p = predict_proba(train(tr, params), te)
    pred = p >= THRESHOLD
    return float(te.y[pred].mean()) if pred.any() else 0.0


def cv_precision(dataset: Dataset, params: TreeParams, n_folds: int = 3) -> float:
    """Mean precision over chronological folds; degenerate folds score 0."""
    scores = [_fold_precision(dataset, a, b, params) for a, b in time_series_folds(len(dataset), n_folds)]
    return float(np.mean(scores))


@dataclass
class RFECVResult:
    selected: tuple[str, ...]
    # (feature subset, mean CV precision) per elimination step, starting from the full set
    trace: list[tuple[tuple[str, ...], float]]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.trace]


def rfecv(dataset: Dataset, params: TreeParams = TreeParams(), folds: int = 3) -> RFECVResult:
    """Recursive elimination with step 1, scored by chronological CV precision.

    Importances come from a fit on the whole dataset restricted to the
    current subset. The lowest-importance feature is dropped (ties drop the
    later column). The subset with the best mean precision wins; ties go to
    the smaller subset.
    """
    names = tuple(dataset.feature_names)
    if len(names) == 0:
        raise ValueError("rfecv needs at least one feature")
    if len(names) == 1:
        return RFECVResult(names, [(names, cv_precision(dataset, params, folds))])
    current = list(names)
    trace = []
    while True:
        sub = dataset.select(current)
        trace.append((tuple(current), cv_precision(sub, params, folds)))
        if len(current) == 1:
            break
        imp = feature_importance(train(sub, params))
        worst = min(range(len(current)), key=lambda k: (imp[current[k]], -k))
        del current[worst]
    best = max(trace, key=lambda item: (item[1], -len(item[0])))
    return RFECVResult(best[0], trace)


@dataclass(frozen=True)
class TuningSpec:
    iterations: tuple[int, ...] = (100, 300, 500)
    max_depth: tuple[int, ...] = (3, 5, 7)
    l2_regularization: tuple[float, ...] = (1.0, 3.0, 10.0)
    has_time: tuple[bool, ...] = (True, False)
    learning_rate: float = 0.1
    folds: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("iterations", "max_depth", "l2_regularization", "has_time"):
            grid = tuple(getattr(self, name))
            if not grid:
                raise ValueError(f"tuning grid '{name}' is empty")
            object.__setattr__(self, name, grid)

    def grid(self) -> list[TreeParams]:
        return [TreeParams(iterations=i, max_depth=d, l2_regularization=l2, has_time=t,
                           learning_rate=self.learning_rate, seed=self.seed)
                for i, d, l2, t in itertools.product(self.iterations, self.max_depth,
                                                     self.l2_regularization, self.has_time)]

    @property
    def size(self) -> int:
        return len(self.iterations) * len(self.max_depth) * len(self.l2_regularization) * len(self.has_time)


@dataclass
class TuneResult:
    params: TreeParams
    model: GBDTModel
    cv_table: list[tuple[TreeParams, float]]


def tune(dataset: Dataset, spec: TuningSpec = TuningSpec()) -> TuneResult:
    """Exhaustive grid search on mean CV precision (ties keep the earlier grid
    point), then a final fit of the winner on the whole dataset."""
    table = [(p, cv_precision(dataset, p, spec.folds)) for p in spec.grid()]
    best = max(range(len(table)), key=lambda k: (table[k][1], -k))
    params = table[best][0]
    return TuneResult(params, train(dataset, params), table)


@dataclass
class PairResult:
    train_batch: str
    test_batch: str
    metrics: MetricsRecord
    model: GBDTModel
    selected_features: tuple[str, ...]
    params: TreeParams
    probabilities: np.ndarray
    labels: np.ndarray


@dataclass
class WalkForwardResult:
    pairs: list[PairResult] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (batch pair, reason)

    @property
    def records(self) -> list[MetricsRecord]:
        return [p.metrics for p in self.pairs]


def walk_forward(batches: Sequence[tuple[str, Dataset, Dataset]], spec: TuningSpec = TuningSpec(),
                 rfe_params: TreeParams | None = None, select_features: bool = True,
                 feature_subset: Sequence[str] | None = None) -> WalkForwardResult:
    """Train on batch N, evaluate on batch N+1, for every consecutive pair.

    ``batches`` holds ``(label, training_view, test_view)`` per batch in
    time order. Each pair runs elimination then tuning on batch N's training
    view and scores batch N+1's test view. ``feature_subset`` fixes the
    features and disables elimination. Pairs whose data cannot support
    training or scoring are skipped with the reason logged.
    """
    if len(batches) < 2:
        raise ValueError("walk_forward needs at least 2 batches")
    rfe_params = rfe_params or TreeParams(seed=spec.seed)
    out = WalkForwardResult()
    for (lab_n, train_n, _), (lab_m, _, test_m) in zip(batches[:-1], batches[1:]):
        pair = f"{lab_n} -> {lab_m}"
        reason = None
        if len(train_n) == 0:
            reason = "training batch has no labelled events"
        elif len(np.unique(train_n.y)) < 2:
            reason = "training batch has a single class"
        elif len(train_n) < spec.folds + 1:
            reason = f"training batch has only {len(train_n)} rows"
        elif len(test_m) == 0:
            reason = "test batch has no labelled events"
        if reason:
            logger.warning("walk-forward pair %s skipped: %s", pair, reason)
            out.skipped.append((pair, reason))
            continue
        data = train_n
        if feature_subset is not None:
            selected = tuple(feature_subset)
        elif select_features and len(data.feature_names) > 1:
            selected = rfecv(data, replace(rfe_params, seed=spec.seed), spec.folds).selected
        else:
            selected = tuple(data.feature_names)
        data = data.select(selected)
        tuned = tune(data, spec)
        test = test_m.select(selected)
        probs = predict_proba(tuned.model, test)
        metrics = classification_metrics(test.y, probs, THRESHOLD, batch=lab_m)
        logger.info("pair %s: %d features, precision %.3f vs prevalence %.3f", pair, len(selected),
                    metrics.precision, metrics.null_precision)
        out.pairs.append(PairResult(lab_n, lab_m, metrics, tuned.model, selected, tuned.params, probs, test.y))
    return out
