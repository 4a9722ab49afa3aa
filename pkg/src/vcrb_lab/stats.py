"""Classification metrics, paired effect sizes, exact Wilcoxon tests and the RQ protocol."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats as sps

logger = logging.getLogger(__name__)

EXACT_WILCOXON_MAX_N = 25


@dataclass(frozen=True)
class MetricsRecord:
    precision: float
    pr_auc: float
    roc_auc: float
    f1: float
    null_precision: float
    batch: str = ""
    n: int = 0
    n_positive: int = 0


def average_precision(labels, scores) -> float:
    """Step-integral of the precision-recall curve over distinct score thresholds."""
    y = np.asarray(labels, dtype=int)
    s = np.asarray(scores, dtype=float)
    n_pos = int(y.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s_sorted) - 1]
    tp = np.cumsum(y_sorted)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def roc_auc(labels, scores) -> float:
    """Mann-Whitney rank statistic with average ranks for ties."""
    y = np.asarray(labels, dtype=int)
    s = np.asarray(scores, dtype=float)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = sps.rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def classification_metrics(labels, probabilities, threshold: float = 0.5, batch: str = "") -> MetricsRecord:
    """Threshold metrics at ``probability >= threshold`` plus both ranking AUCs.

    Precision with no predicted positives is 0. AUC fields are NaN when only
    one class is present.
    """
    y = np.asarray(labels, dtype=int)
    p = np.asarray(probabilities, dtype=float)
    if len(y) == 0:
        raise ValueError("empty input")
    if len(y) != len(p):
        raise ValueError("labels and probabilities differ in length")
    pred = p >= threshold
    tp = int(np.sum(pred & (y == 1)))
    n_pred = int(pred.sum())
    n_pos = int(y.sum())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_pos if n_pos else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsRecord(precision=precision, pr_auc=average_precision(y, p), roc_auc=roc_auc(y, p), f1=f1,
                         null_precision=n_pos / len(y), batch=batch, n=len(y), n_positive=n_pos)


# --------------------------------------------------------------------------- paired statistics


@dataclass(frozen=True)
class PairedSample:
    batches: tuple[str, ...]
    treatment: np.ndarray
    control: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.treatment, dtype=float)
        c = np.asarray(self.control, dtype=float)
        object.__setattr__(self, "treatment", t)
        object.__setattr__(self, "control", c)
        object.__setattr__(self, "batches", tuple(self.batches))
        if len(t) != len(c) or len(t) != len(self.batches):
            raise ValueError("paired sample columns must align")
        if len(t) < 2:
            raise ValueError("paired sample needs at least 2 pairs")

    @property
    def n(self) -> int:
        return len(self.treatment)


@dataclass(frozen=True)
class EffectSizeResult:
    g_av: float
    ci_low: float
    ci_high: float
    n: int
    confidence: float = 0.95

    @property
    def significant(self) -> bool:
        return self.ci_low > 0 or self.ci_high < 0


def hedges_correction(n: int) -> float:
    return 1.0 - 3.0 / (4.0 * (n - 1) - 1.0)


def _g_av(t: np.ndarray, c: np.ndarray) -> float:
    sd = (np.std(t, ddof=1) + np.std(c, ddof=1)) / 2
    if sd == 0:
        return float("nan")
    return float(np.mean(t - c) / sd * hedges_correction(len(t)))


def hedges_g_av(sample: PairedSample, confidence: float = 0.95, n_boot: int = 10_000,
                seed: int = 0) -> EffectSizeResult:
    """Bias-corrected paired effect size with a percentile-bootstrap interval.

    The interval resamples pairs; resamples with zero pooled spread are
    skipped. It is widened if needed so it always contains the point estimate.
    """
    n = sample.n
    if n < 3:
        raise ValueError("hedges_g_av needs n >= 3")
    t, c = sample.treatment, sample.control
    g = _g_av(t, c)
    if math.isnan(g):
        raise ValueError("zero pooled standard deviation")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_boot, n))
    bt, bc = t[idx], c[idx]
    sd = (np.std(bt, axis=1, ddof=1) + np.std(bc, axis=1, ddof=1)) / 2
    diff = np.mean(bt - bc, axis=1)
    ok = sd > 0
    boots = diff[ok] / sd[ok] * hedges_correction(n)
    alpha = 1 - confidence
    if boots.size:
        lo, hi = np.quantile(boots, [alpha / 2, 1 - alpha / 2])
    else:
        lo = hi = g
    return EffectSizeResult(g_av=g, ci_low=float(min(lo, g)), ci_high=float(max(hi, g)), n=n,
                            confidence=confidence)


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n_effective: int
    alternative: str = "greater"
    exact: bool = True


def _signed_ranks(diff: np.ndarray):
    d = diff[diff != 0]
    if d.size == 0:
        raise ValueError("all differences are zero")
    ranks = sps.rankdata(np.abs(d))
    return d, ranks


def _exact_upper_tail(ranks: np.ndarray, w: float) -> float:
    """P(W+ >= w) under random signs, by dynamic programming over doubled rank sums."""
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    target = int(round(2 * w))
    return float(sum(counts[target:]) / (2 ** len(doubled)))


def _exact_lower_tail(ranks: np.ndarray, w: float) -> float:
    total = float(ranks.sum())
    # W+ <= w  <=>  W- >= total - w, and W- has the same null law as W+
    return _exact_upper_tail(ranks, total - w)


def wilcoxon_one_sided(sample: PairedSample, alternative: str = "greater") -> WilcoxonResult:
    """One-sided signed-rank test of ``treatment - control``.

    W is the sum of positive ranks after dropping zero differences, with
    average ranks for tied magnitudes. Exact p-values for up to 25 non-zero
    differences; a continuity-corrected normal approximation above.
    """
    if alternative not in ("greater", "less"):
        raise ValueError("alternative must be 'greater' or 'less'")
    d, ranks = _signed_ranks(sample.treatment - sample.control)
    n = len(d)
    w = float(ranks[d > 0].sum())
    if n <= EXACT_WILCOXON_MAX_N:
        p = _exact_upper_tail(ranks, w) if alternative == "greater" else _exact_lower_tail(ranks, w)
        return WilcoxonResult(w, min(1.0, p), n, alternative, True)
    mean = n * (n + 1) / 4
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_counts ** 3 - tie_counts) / 48
    if alternative == "greater":
        z = (w - mean - 0.5) / math.sqrt(var)
        p = float(sps.norm.sf(z))
    else:
        z = (w - mean + 0.5) / math.sqrt(var)
        p = float(sps.norm.cdf(z))
    return WilcoxonResult(w, min(1.0, p), n, alternative, False)


def bonferroni(alpha: float = 0.05, m: int = 1) -> float:
    if m < 1:
        raise ValueError("number of tests must be >= 1")
    return alpha / m


# --------------------------------------------------------------------------- research-question harness

RQ_SPEC = {
    "RQ1": {"metric": "precision", "alternative": "greater",
            "treatment": "model", "control": "always-positive"},
    "RQ2": {"metric": "pr_auc", "alternative": "greater", "treatment": "VCRB", "control": "price levels"},
    "RQ3": {"metric": "pr_auc", "alternative": "greater", "treatment": "liquid", "control": "less liquid"},
    "RQ4": {"metric": "footrule", "alternative": "less", "treatment": "SHAP vs decision paths",
            "control": "bootstrap"},
}


@dataclass
class RunRecord:
    """One walk-forward evaluation pair of one instrument/method/configuration."""

    instrument: str
    method: str  # "VCRB" or "PriceLevel"
    config: str  # e.g. "range7"; "levels" for price levels
    batch: str
    precision: float
    pr_auc: float
    roc_auc: float
    f1: float
    null_precision: float


@dataclass
class RelatednessRecord:
    instrument: str
    config: str
    batch: str
    actual_distance: float
    bootstrap_distance: float


@dataclass
class TestOutcome:
    rq: str
    configuration: str
    n: int
    treatment_mean: float
    control_mean: float
    effect: EffectSizeResult | None
    wilcoxon: WilcoxonResult | None
    alpha: float
    reject: bool
    note: str = ""


@dataclass
class RQReport:
    outcomes: dict = field(default_factory=dict)  # rq -> list[TestOutcome]

    def family(self, rq: str) -> list[TestOutcome]:
        return self.outcomes.get(rq, [])


def _pair(groups_t: dict, groups_c: dict, context: str) -> PairedSample:
    if set(groups_t) != set(groups_c):
        raise ValueError(f"{context}: mismatched batch labels between groups")
    keys = sorted(groups_t, key=_batch_sort_key)
    return PairedSample(tuple(keys), np.array([groups_t[k] for k in keys]),
                        np.array([groups_c[k] for k in keys]))


def _batch_sort_key(label: str):
    try:
        m, y = label.split(" to ")[0].split("/")
        return (int(y), int(m), label)
    except ValueError:
        return (0, 0, label)


def _evaluate(rq: str, config: str, sample: PairedSample, m: int, alpha: float, adjust_ci: bool,
              n_boot: int, seed: int) -> TestOutcome:
    alt = RQ_SPEC[rq]["alternative"]
    corrected = bonferroni(alpha, m)
    note = ""
    effect = None
    wil = None
    try:
        conf = 1 - corrected if adjust_ci else 1 - alpha
        effect = hedges_g_av(sample, confidence=conf, n_boot=n_boot, seed=seed)
    except ValueError as exc:
        note = f"effect size undefined: {exc}"
    try:
        wil = wilcoxon_one_sided(sample, alternative=alt)
    except ValueError as exc:
        note = (note + "; " if note else "") + f"test undefined: {exc}"
    reject = wil is not None and wil.p_value < corrected
    return TestOutcome(rq=rq, configuration=config, n=sample.n, treatment_mean=float(sample.treatment.mean()),
                       control_mean=float(sample.control.mean()), effect=effect, wilcoxon=wil, alpha=corrected,
                       reject=reject, note=note)


def rq_harness(records: Iterable[RunRecord], relatedness: Iterable[RelatednessRecord] = (),
               liquid: str | None = None, less_liquid: str | None = None, alpha: float = 0.05,
               adjust_ci: bool = True, n_boot: int = 10_000, seed: int = 0) -> RQReport:
    """Assemble the paired comparisons per research question and test them.

    RQ1 pairs model precision with the always-positive precision per
    instrument and VCRB configuration. RQ2 pairs VCRB PR-AUC with price-level
    PR-AUC per instrument and configuration. RQ3 pairs the liquid instrument
    against the less liquid one per configuration. RQ4 pairs the actual
    Footrule distance with the bootstrap null, expecting smaller actual
    distances. Bonferroni correction is applied within each family.
    """
    records = list(records)
    relatedness = list(relatedness)
    report = RQReport()

    planned: dict[str, list[tuple[str, PairedSample]]] = defaultdict(list)

    vcrb = [r for r in records if r.method == "VCRB"]
    by_cfg = defaultdict(dict)
    for r in vcrb:
        by_cfg[(r.instrument, r.config)][r.batch] = r
    for (inst, cfg), rows in sorted(by_cfg.items()):
        t = {b: r.precision for b, r in rows.items()}
        c = {b: r.null_precision for b, r in rows.items()}
        if len(t) >= 2:
            planned["RQ1"].append((f"{inst} {cfg}", _pair(t, c, "RQ1")))

    levels = defaultdict(dict)
    for r in records:
        if r.method == "PriceLevel":
            levels[r.instrument][r.batch] = r.pr_auc
    for (inst, cfg), rows in sorted(by_cfg.items()):
        if inst not in levels:
            continue
        t = {b: r.pr_auc for b, r in rows.items()}
        if len(t) >= 2:
            planned["RQ2"].append((f"{inst} {cfg}", _pair(t, levels[inst], "RQ2")))

    if liquid and less_liquid:
        configs = sorted({cfg for (_, cfg) in by_cfg})
        for cfg in configs:
            a, b = by_cfg.get((liquid, cfg)), by_cfg.get((less_liquid, cfg))
            if not a or not b:
                continue
            t = {k: r.pr_auc for k, r in a.items()}
            c = {k: r.pr_auc for k, r in b.items()}
            if len(t) >= 2:
                planned["RQ3"].append((f"{liquid} vs {less_liquid} {cfg}", _pair(t, c, "RQ3")))

    rel = defaultdict(dict)
    for r in relatedness:
        rel[(r.instrument, r.config)][r.batch] = r
    for (inst, cfg), rows in sorted(rel.items()):
        t = {b: r.actual_distance for b, r in rows.items()}
        c = {b: r.bootstrap_distance for b, r in rows.items()}
        if len(t) >= 2:
            planned["RQ4"].append((f"{inst} {cfg}", _pair(t, c, "RQ4")))

    for rq, items in planned.items():
        m = len(items)
        report.outcomes[rq] = [_evaluate(rq, cfg, sample, m, alpha, adjust_ci, n_boot, seed)
                               for cfg, sample in items]
    return report


def _fmt(v, digits=4) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    return f"{v:.{digits}f}" if isinstance(v, float) else str(v)


def format_report(report: RQReport) -> str:
    """Tab-separated blocks, one per research question family."""
    lines = []
    for rq in sorted(report.outcomes):
        spec = RQ_SPEC[rq]
        outs = report.outcomes[rq]
        lines.append(f"# {rq}\tmetric={spec['metric']}\ttreatment={spec['treatment']}\t"
                     f"control={spec['control']}\talternative={spec['alternative']}\ttests={len(outs)}")
        lines.append("configuration\tn\ttreatment_mean\tcontrol_mean\tg_av\tci_low\tci_high\tci_level\t"
                     "W\tp_value\talpha\tverdict\tnote")
        for o in outs:
            e, w = o.effect, o.wilcoxon
            lines.append("\t".join([
                o.configuration, str(o.n), _fmt(o.treatment_mean), _fmt(o.control_mean),
                _fmt(e.g_av if e else None), _fmt(e.ci_low if e else None), _fmt(e.ci_high if e else None),
                _fmt(e.confidence if e else None), _fmt(w.statistic if w else None, 1),
                f"{w.p_value:.6g}" if w else "NA", f"{o.alpha:.6g}",
                "reject" if o.reject else "fail to reject", o.note]))
        lines.append("")
    return "\n".join(lines)


def metrics_rows(records: Sequence[RunRecord]) -> list[str]:
    head = "instrument\tmethod\tconfig\tbatch\tprecision\tpr_auc\troc_auc\tf1\tnull_precision"
    rows = [head]
    for r in records:
        rows.append("\t".join([r.instrument, r.method, r.config, r.batch] +
                              [repr(float(getattr(r, k))) for k in
                               ("precision", "pr_auc", "roc_auc", "f1", "null_precision")]))
    return rows


def read_metrics_table(path) -> list[RunRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            if not line.strip():
                continue
            f = dict(zip(header, line.rstrip("\n").split("\t")))
            out.append(RunRecord(f["instrument"], f["method"], f["config"], f["batch"],
                                 *(float(f[k]) for k in ("precision", "pr_auc", "roc_auc", "f1",
                                                         "null_precision"))))
    return out


def read_relatedness_table(path) -> list[RelatednessRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            if not line.strip():
                continue
            f = dict(zip(header, line.rstrip("\n").split("\t")))
            out.append(RelatednessRecord(f["instrument"], f["config"], f["batch"], float(f["actual_distance"]),
                                         float(f["bootstrap_distance"])))
    return out
