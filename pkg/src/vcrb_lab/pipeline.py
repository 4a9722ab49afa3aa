"""Stage-by-stage experiment pipeline with a hashed manifest and resumable artifacts.

Run directory layout::

    manifest.json
    ingest/<inst>.ticks.csv        ingest/<inst>.batches.tsv
    extract/<inst>.events.tsv      label/<inst>.events.tsv
    features/<inst>.features.tsv
    train/metrics.tsv  train/pairs.tsv  train/predictions.tsv  train/models/*.json
    explain/relatedness.tsv  explain/matrices/*.tsv
    backtest/summary.tsv  backtest/*.trades.tsv  backtest/*.equity.tsv
    stats/report.tsv
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import platform
import time
import zlib
from collections import defaultdict
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .backtest import (equity_curve, profitability_threshold, rolling_sharpe, simulate, write_equity,
                       write_trades)
from .boosting import Dataset, GBDTModel, TreeParams, load_model, save_model, train
from .config import RunConfig
from .explain import (bootstrap_null, extract_paths, footrule, interaction_matrix, rank_matrix,
                      shapley_interactions, write_matrix, write_ranks)
from .features import FEATURE_NAMES, attach_features, feature_matrix, read_feature_table, write_feature_table
from .labeling import label_events
from .market_data import Batch, generate_synthetic, load_ticks, split_batches, write_ticks
from .model_selection import walk_forward
from .patterns import (Label, PatternEvent, PatternKind, Side, extract_price_levels, extract_vcrb, read_events,
                       write_events)
from .stats import RelatednessRecord, RunRecord, format_report, metrics_rows, read_metrics_table, \
    read_relatedness_table, rq_harness

logger = logging.getLogger(__name__)

STAGES = ("ingest", "extract", "label", "features", "train", "explain", "backtest", "stats")
MANIFEST = "manifest.json"
LOCK = ".lock"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


class MissingArtifact(FileNotFoundError):
    pass


class RunLocked(RuntimeError):
    pass


def derive_seed(root: int, *keys) -> int:
    """Independent child seed for a named purpose."""
    tag = zlib.crc32("/".join(str(k) for k in keys).encode())
    return int(np.random.SeedSequence([root, tag]).generate_state(1)[0])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunLock:
    """Exclusive ownership of a run directory for one process."""

    def __init__(self, root: Path):
        self.path = Path(root) / LOCK

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLocked(f"run directory is locked by {self.path} (remove it if no run is active)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def versions() -> dict:
    import numba
    import scipy
    import yaml
    return {"vcrb_lab": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "pyyaml": yaml.__version__}


def _config_slug(kind: PatternKind, range_levels) -> str:
    return f"range{range_levels}" if kind is PatternKind.VCRB else "levels"


def _method(kind: PatternKind) -> str:
    return "VCRB" if kind is PatternKind.VCRB else "PriceLevel"


class RunContext:
    def __init__(self, config: RunConfig, root=None):
        self.config = config
        self.root = Path(root if root is not None else config.out)
        self._batches: dict[str, list[Batch]] = {}

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def output(self, *parts) -> Path:
        p = self.path(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def require(self, *parts) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise MissingArtifact(f"missing upstream artifact {p}")
        return p

    def rel(self, p: Path) -> str:
        return p.relative_to(self.root).as_posix()

    def batches(self, name: str) -> list[Batch]:
        if name not in self._batches:
            inst = next(i for i in self.config.instruments if i.name == name)
            ticks = load_ticks(self.require("ingest", f"{name}.ticks.csv"), inst.spec)
            b = split_batches(ticks, self.config.months_per_batch)
            if self.config.max_batches is not None:
                b = b[:self.config.max_batches]
            self._batches[name] = b
        return self._batches[name]

    def instruments(self):
        if not self.config.instruments:
            raise ValueError("config lists no instruments")
        return self.config.instruments


# --------------------------------------------------------------------------- stages


def stage_ingest(ctx: RunContext) -> list[Path]:
    outs = []
    for inst in ctx.instruments():
        if inst.synthetic is not None:
            ticks = generate_synthetic(derive_seed(ctx.config.seed, "ingest", inst.name), inst.synthetic)
        else:
            ticks = load_ticks(inst.data, inst.spec)
        p = ctx.output("ingest", f"{inst.name}.ticks.csv")
        write_ticks(p, ticks, inst.spec)
        ctx._batches.pop(inst.name, None)
        q = ctx.output("ingest", f"{inst.name}.batches.tsv")
        with open(q, "w", encoding="utf-8") as fh:
            fh.write("batch\tstart_ts_ms\tend_ts_ms\tn_ticks\n")
            for b in ctx.batches(inst.name):
                fh.write(f"{b.label}\t{b.start_ts}\t{b.end_ts}\t{len(b)}\n")
        logger.info("ingest %s: %d ticks, %d batches", inst.name, len(ticks), len(ctx.batches(inst.name)))
        outs += [p, q]
    return outs


def _extract_batch(ctx: RunContext, batch: Batch) -> list[PatternEvent]:
    events = []
    for r in ctx.config.ranges:
        events += extract_vcrb(batch, r)
    pl = ctx.config.price_levels
    if pl.enabled:
        events += extract_price_levels(batch, pl.lookback_ticks, pl.rejection_ticks,
                                       ctx.config.label.approach_ticks, ctx.config.label.crossing_ticks)
    return events


def extract_counts(ctx: RunContext) -> list[tuple[str, str, int]]:
    """Event counts per instrument and configuration, without writing anything."""
    counts = []
    for inst in ctx.instruments():
        tally = defaultdict(int)
        for b in ctx.batches(inst.name):
            for e in _extract_batch(ctx, b):
                tally[_config_slug(e.kind, e.range_levels)] += 1
        slugs = [f"range{r}" for r in ctx.config.ranges] + (["levels"] if ctx.config.price_levels.enabled else [])
        counts += [(inst.name, s, tally[s]) for s in slugs]
    return counts


def stage_extract(ctx: RunContext) -> list[Path]:
    outs = []
    for inst in ctx.instruments():
        events = []
        for b in ctx.batches(inst.name):
            events += _extract_batch(ctx, b)
        p = ctx.output("extract", f"{inst.name}.events.tsv")
        write_events(p, events)
        logger.info("extract %s: %d events", inst.name, len(events))
        outs.append(p)
    return outs


def _read_events(ctx: RunContext, stage: str, name: str) -> tuple[list[PatternEvent], dict[str, Batch]]:
    by_label = {b.label: b for b in ctx.batches(name)}
    return read_events(ctx.require(stage, f"{name}.events.tsv"), by_label), by_label


def stage_label(ctx: RunContext) -> list[Path]:
    outs = []
    for inst in ctx.instruments():
        events, by_label = _read_events(ctx, "extract", inst.name)
        grouped = defaultdict(list)
        for e in events:
            grouped[e.batch_label].append(e)
        labelled = []
        for lab, b in by_label.items():
            labelled += label_events(grouped.get(lab, []), b, ctx.config.label)
        p = ctx.output("label", f"{inst.name}.events.tsv")
        write_events(p, labelled)
        outs.append(p)
    return outs


KEY_COLUMNS = ("method", "config", "batch", "formation_index", "target", "trigger_index", "approach_side",
               "disposition")


def stage_features(ctx: RunContext) -> list[Path]:
    outs = []
    for inst in ctx.instruments():
        events, by_label = _read_events(ctx, "label", inst.name)
        grouped = defaultdict(list)
        for e in events:
            if e.label is not Label.UNRESOLVED:
                grouped[e.batch_label].append(e)
        rows, keys = [], []
        for lab, b in by_label.items():
            evs = sorted(attach_features(grouped.get(lab, []), b, ctx.config.features),
                         key=lambda e: (e.kind.value, e.range_levels or 0, e.formation_tick_index))
            rows.append(feature_matrix(evs))
            keys += [dict(zip(KEY_COLUMNS, (_method(e.kind), _config_slug(e.kind, e.range_levels), lab,
                                            e.formation_tick_index, e.target_price_idx, e.trigger_tick_index,
                                            e.approach_side, e.label.value))) for e in evs]
        X = np.vstack(rows) if rows else np.zeros((0, len(FEATURE_NAMES)))
        p = ctx.output("features", f"{inst.name}.features.tsv")
        write_feature_table(p, X, FEATURE_NAMES, keys=keys or None)
        outs.append(p)
    return outs


def _views(ctx: RunContext, name: str):
    """(method, config) -> list of (batch, train Dataset, test Dataset, test keys) in batch order."""
    keys, X, names, _ = read_feature_table(ctx.require("features", f"{name}.features.tsv"), FEATURE_NAMES)
    order = [b.label for b in ctx.batches(name)]
    n = len(X)
    groups = defaultdict(lambda: defaultdict(list))
    for i in range(n):
        groups[(keys["method"][i], keys["config"][i])][keys["batch"][i]].append(i)
    out = {}
    for gk, per_batch in sorted(groups.items()):
        seq = []
        for lab in order:
            idx = per_batch.get(lab, [])
            disp = keys["disposition"]
            tr = [i for i in idx if disp[i] in ("Positive", "Negative")]
            y_tr = np.array([disp[i] == "Positive" for i in tr], dtype=int)
            y_te = np.array([disp[i] == "Positive" for i in idx], dtype=int)
            test_keys = [{k: keys[k][i] for k in KEY_COLUMNS} for i in idx]
            seq.append((lab, Dataset(X[tr], y_tr, names), Dataset(X[idx], y_te, names), test_keys))
        out[gk] = seq
    return out


def stage_train(ctx: RunContext) -> list[Path]:
    cfg = ctx.config
    records: list[RunRecord] = []
    pair_lines = ["instrument\tmethod\tconfig\tpair\ttrain_batch\ttest_batch\tmodel\tfeatures\tparams"]
    pred_lines = ["instrument\t" + "\t".join(KEY_COLUMNS) + "\tprobability"]
    outs = []
    for inst in ctx.instruments():
        for (method, slug), seq in _views(ctx, inst.name).items():
            spec = dataclasses.replace(cfg.tuning, seed=derive_seed(cfg.seed, "train", inst.name, slug))
            rfe = TreeParams(iterations=cfg.rfe.iterations, max_depth=cfg.rfe.max_depth, seed=spec.seed)
            test_keys = {lab: tk for lab, _, _, tk in seq}
            res = walk_forward([(lab, tr, te) for lab, tr, te, _ in seq], spec, rfe_params=rfe,
                               select_features=cfg.rfe.enabled)
            for k, pr in enumerate(res.pairs):
                m = pr.metrics
                records.append(RunRecord(inst.name, method, slug, pr.test_batch, m.precision, m.pr_auc,
                                         m.roc_auc, m.f1, m.null_precision))
                mp = ctx.output("train", "models", f"{inst.name}__{slug}__{k:02d}.json")
                save_model(pr.model, mp)
                outs.append(mp)
                params = json.dumps(dataclasses.asdict(pr.params), sort_keys=True)
                pair_lines.append("\t".join([inst.name, method, slug, str(k), pr.train_batch, pr.test_batch,
                                             ctx.rel(mp), ",".join(pr.selected_features), params]))
                for key, p in zip(test_keys[pr.test_batch], pr.probabilities):
                    pred_lines.append("\t".join([inst.name] + [str(key[c]) for c in KEY_COLUMNS] + [repr(float(p))]))
            logger.info("train %s %s: %d pairs, %d skipped", inst.name, slug, len(res.pairs), len(res.skipped))
    p = ctx.output("train", "metrics.tsv")
    p.write_text("\n".join(metrics_rows(records)) + "\n", encoding="utf-8")
    q = ctx.output("train", "pairs.tsv")
    q.write_text("\n".join(pair_lines) + "\n", encoding="utf-8")
    r = ctx.output("train", "predictions.tsv")
    r.write_text("\n".join(pred_lines) + "\n", encoding="utf-8")
    return [p, q, r] + outs


def _read_tsv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().rstrip("\n").split("\t")
        return [dict(zip(head, ln.rstrip("\n").split("\t"))) for ln in fh if ln.strip()]


def stage_explain(ctx: RunContext) -> list[Path]:
    cfg = ctx.config
    ex = cfg.explain
    names = list(ex.features)
    pairs = [r for r in _read_tsv(ctx.require("train", "pairs.tsv")) if r["method"] == "VCRB"]
    views = {}
    outs = []
    lines = ["instrument\tconfig\tbatch\tactual_distance\tbootstrap_distance\tbootstrap_se"]
    for row in pairs:
        inst, slug, k = row["instrument"], row["config"], int(row["pair"])
        if inst not in views:
            views[inst] = _views(ctx, inst)
        seq = {lab: tr for lab, tr, _, _ in views[inst][("VCRB", slug)]}
        data = seq[row["train_batch"]].select(names)
        params = TreeParams(**json.loads(row["params"]))
        model = train(data, params)
        eq1 = interaction_matrix(extract_paths(model, data), names)
        rng = np.random.default_rng(derive_seed(cfg.seed, "explain", inst, slug, k))
        bg = data.X[np.sort(rng.choice(len(data), min(ex.background_rows, len(data)), replace=False))]
        xs = data.X[np.sort(rng.choice(len(data), min(ex.explain_rows, len(data)), replace=False))]
        shap = shapley_interactions(model, bg, xs, ex.max_features)
        ra, rb = rank_matrix(eq1), rank_matrix(shap)
        null = bootstrap_null(eq1, shap, ex.n_boot, derive_seed(cfg.seed, "bootstrap", inst, slug, k))
        stem = f"{inst}__{slug}__{k:02d}"
        for tag, mat, ranks in (("paths", eq1, ra), ("shap", shap, rb)):
            mp = ctx.output("explain", "matrices", f"{stem}.{tag}.tsv")
            write_matrix(mp, mat)
            rp = ctx.output("explain", "matrices", f"{stem}.{tag}.ranks.tsv")
            write_ranks(rp, mat, ranks)
            outs += [mp, rp]
        lines.append(f"{inst}\t{slug}\t{row['test_batch']}\t{footrule(ra, rb)}\t{null.mean!r}\t"
                     f"{null.standard_error!r}")
    p = ctx.output("explain", "relatedness.tsv")
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return [p] + outs


def explain_model_file(ctx: RunContext, model_path) -> list[Path]:
    """Decision-path matrix of a stored model, supports taken from its node covers."""
    model = load_model(model_path)
    paths = extract_paths(model)
    mat = interaction_matrix(paths, model.feature_names)
    stem = Path(model_path).stem
    mp = ctx.output("explain", f"{stem}.paths.tsv")
    write_matrix(mp, mat)
    rp = ctx.output("explain", f"{stem}.paths.ranks.tsv")
    write_ranks(rp, mat, rank_matrix(mat))
    lp = ctx.output("explain", f"{stem}.paths.list.tsv")
    with open(lp, "w", encoding="utf-8") as fh:
        fh.write("tree\tleaf\tconditions\tcontribution\tsupport\n")
        for pth in paths:
            conds = " & ".join(f"{model.feature_names[c.feature_id]} {'<=' if c.goes_left else '>'} "
                               f"{c.threshold!r}" for c in pth.conditions)
            fh.write(f"{pth.tree_index}\t{pth.leaf_id}\t{conds}\t{pth.contribution!r}\t{pth.support!r}\n")
    return [mp, rp, lp]


def stage_backtest(ctx: RunContext) -> list[Path]:
    cfg = ctx.config
    preds = _read_tsv(ctx.require("train", "predictions.tsv"))
    groups = defaultdict(lambda: defaultdict(list))
    for r in preds:
        groups[(r["instrument"], r["method"], r["config"])][r["batch"]].append(r)
    outs = []
    lines = ["instrument\tmethod\tconfig\ttrades\twin_rate\tprofitability_threshold\tfinal_equity_ticks\t"
             "mean_rolling_sharpe"]
    threshold = profitability_threshold(cfg.strategy)
    for (inst, method, slug), per_batch in sorted(groups.items()):
        by_label = {b.label: b for b in ctx.batches(inst)}
        trades, stamps = [], []
        for lab in (b.label for b in ctx.batches(inst)):
            rows = per_batch.get(lab)
            if not rows:
                continue
            b = by_label[lab]
            events = [PatternEvent(kind=PatternKind.VCRB if method == "VCRB" else PatternKind.PRICE_LEVEL,
                                   target_price_idx=int(r["target"]), formation_tick_index=int(r["formation_index"]),
                                   side=Side.TARGET_ABOVE, batch_label=lab,
                                   trigger_tick_index=int(r["trigger_index"]) if r["trigger_index"] != "None" else None,
                                   approach_side=int(r["approach_side"])) for r in rows]
            probs = [float(r["probability"]) for r in rows]
            trades += simulate(events, probs, b.ticks, cfg.strategy, batch=lab).trades
            stamps.append(b.ticks.start_ts_ms)
        curve = equity_curve(trades, np.concatenate(stamps) if stamps else [], cfg.strategy.notional_ticks)
        sharpe = rolling_sharpe(curve) if len(curve.days) >= 252 else None
        stem = f"{inst}__{slug}"
        tp = ctx.output("backtest", f"{stem}.trades.tsv")
        write_trades(tp, trades)
        ep = ctx.output("backtest", f"{stem}.equity.tsv")
        write_equity(ep, curve, sharpe)
        outs += [tp, ep]
        wins = sum(t.pnl_ticks > 0 for t in trades)
        mean_sharpe = float(np.nanmean(sharpe.raw)) if sharpe is not None and np.isfinite(sharpe.raw).any() \
            else float("nan")
        lines.append(f"{inst}\t{method}\t{slug}\t{len(trades)}\t"
                     f"{(wins / len(trades) if trades else float('nan'))!r}\t{threshold!r}\t{curve.final!r}\t"
                     f"{mean_sharpe!r}")
    p = ctx.output("backtest", "summary.tsv")
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return [p] + outs


def stage_stats(ctx: RunContext, metrics_path=None, relatedness_path=None) -> list[Path]:
    cfg = ctx.config
    records = read_metrics_table(metrics_path or ctx.require("train", "metrics.tsv"))
    rel_path = relatedness_path or ctx.path("explain", "relatedness.tsv")
    relatedness = read_relatedness_table(rel_path) if Path(rel_path).exists() else []
    if relatedness_path is None and not relatedness:
        logger.warning("no relatedness table at %s; RQ4 skipped", rel_path)
    report = rq_harness(records, relatedness, liquid=cfg.stats.liquid, less_liquid=cfg.stats.less_liquid,
                        alpha=cfg.stats.alpha, adjust_ci=cfg.stats.adjust_ci, n_boot=cfg.stats.n_boot,
                        seed=derive_seed(cfg.seed, "stats"))
    p = ctx.output("stats", "report.tsv")
    p.write_text(format_report(report), encoding="utf-8")
    return [p]


STAGE_FUNCS: dict[str, Callable[[RunContext], list[Path]]] = {
    "ingest": stage_ingest, "extract": stage_extract, "label": stage_label, "features": stage_features,
    "train": stage_train, "explain": stage_explain, "backtest": stage_backtest, "stats": stage_stats,
}


# --------------------------------------------------------------------------- manifest


def load_manifest(root: Path) -> dict:
    p = Path(root) / MANIFEST
    if p.exists():
        return json.loads(p.read_text(encoding="utf-8"))
    return {}


def _write_manifest(ctx: RunContext, manifest: dict) -> None:
    manifest.update(format="vcrb-lab-manifest", version=1, config_hash=ctx.config.digest(), seed=ctx.config.seed,
                    versions=versions(), config=ctx.config.to_dict())
    manifest.setdefault("stages", {})
    tmp = ctx.path(MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(ctx.path(MANIFEST))


def _up_to_date(ctx: RunContext, entry: dict | None) -> bool:
    if not entry or entry.get("status") != "complete" or entry.get("config_hash") != ctx.config.digest():
        return False
    for rel, digest in entry.get("outputs", {}).items():
        p = ctx.path(rel)
        if not p.exists() or sha256_file(p) != digest:
            return False
    return True


def run_stage(ctx: RunContext, stage: str, manifest: dict, func=None) -> list[Path]:
    func = func or STAGE_FUNCS[stage]
    t0 = time.perf_counter()
    logger.info("stage %s: start", stage)
    try:
        outs = func(ctx)
    except MissingArtifact as exc:
        manifest.setdefault("stages", {})[stage] = {"status": "failed", "error": str(exc)}
        _write_manifest(ctx, manifest)
        raise StageError(stage, str(exc)) from exc
    except Exception as exc:  # noqa: BLE001 - any failure aborts the run with the stage named
        logger.exception("stage %s failed", stage)
        manifest.setdefault("stages", {})[stage] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
        _write_manifest(ctx, manifest)
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
    manifest.setdefault("stages", {})[stage] = {
        "status": "complete", "config_hash": ctx.config.digest(), "seconds": round(time.perf_counter() - t0, 3),
        "outputs": {ctx.rel(p): sha256_file(p) for p in sorted(set(outs))},
    }
    _write_manifest(ctx, manifest)
    logger.info("stage %s: done in %.1fs", stage, time.perf_counter() - t0)
    return outs


def run_pipeline(config: RunConfig, root=None, force: bool = False) -> Path:
    """Run every stage in order, skipping stages whose recorded outputs are intact.

    Once a stage reruns, every later stage reruns too.
    """
    ctx = RunContext(config, root)
    ctx.instruments()
    with RunLock(ctx.root):
        manifest = load_manifest(ctx.root)
        stale = force
        for stage in STAGES:
            if not stale and _up_to_date(ctx, manifest.get("stages", {}).get(stage)):
                logger.info("stage %s: up to date, skipped", stage)
                continue
            stale = True
            run_stage(ctx, stage, manifest)
    return ctx.root
