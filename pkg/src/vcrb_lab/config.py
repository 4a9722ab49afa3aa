"""Run configuration: a single YAML/JSON document validated before any stage runs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .backtest import StrategyConfig
from .features import FEATURE_NAMES, FeatureConfig
from .labeling import LabelConfig
from .market_data import InstrumentSpec, SyntheticConfig
from .model_selection import TuningSpec

RELATEDNESS_FEATURES = ("P0", "P1", "P2", "P3", "P8", "P9", "P10", "P11", "P12_0", "P13_0", "MS0", "MS2")


class ConfigError(ValueError):
    """Invalid configuration; raised before any stage does work."""


@dataclass(frozen=True)
class InstrumentConfig:
    name: str
    tick_size: float = 0.25
    data: str | None = None
    synthetic: SyntheticConfig | None = None

    @property
    def spec(self) -> InstrumentSpec:
        return InstrumentSpec(self.name, self.tick_size)


@dataclass(frozen=True)
class PriceLevelConfig:
    enabled: bool = True
    lookback_ticks: int = 500
    rejection_ticks: int = 15


@dataclass(frozen=True)
class RFEConfig:
    enabled: bool = True
    iterations: int = 50
    max_depth: int = 3


@dataclass(frozen=True)
class ExplainConfig:
    features: tuple[str, ...] = RELATEDNESS_FEATURES
    background_rows: int = 100
    explain_rows: int = 100
    max_features: int = 15
    n_boot: int = 500

    def __post_init__(self):
        unknown = [f for f in self.features if f not in FEATURE_NAMES]
        if unknown:
            raise ValueError(f"unknown explain features: {unknown}")
        if len(self.features) > self.max_features:
            raise ValueError("explain.features exceeds explain.max_features")
        if min(self.background_rows, self.explain_rows, self.n_boot) < 1:
            raise ValueError("explain row counts and n_boot must be >= 1")


@dataclass(frozen=True)
class StatsConfig:
    alpha: float = 0.05
    n_boot: int = 10_000
    adjust_ci: bool = True
    liquid: str | None = None
    less_liquid: str | None = None

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("stats.alpha must lie in (0, 1)")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    instruments: tuple[InstrumentConfig, ...] = ()
    months_per_batch: int = 3
    max_batches: int | None = None
    ranges: tuple[int, ...] = (5, 7, 9, 11)
    price_levels: PriceLevelConfig = PriceLevelConfig()
    label: LabelConfig = LabelConfig()
    features: FeatureConfig = FeatureConfig()
    tuning: TuningSpec = TuningSpec()
    rfe: RFEConfig = RFEConfig()
    explain: ExplainConfig = ExplainConfig()
    strategy: StrategyConfig = StrategyConfig()
    stats: StatsConfig = StatsConfig()

    def __post_init__(self):
        if not self.ranges:
            raise ValueError("ranges must not be empty")
        for r in self.ranges:
            if r < 3 or r % 2 == 0:
                raise ValueError(f"range {r} must be odd and >= 3")
        names = [i.name for i in self.instruments]
        if len(set(names)) != len(names):
            raise ValueError("instrument names must be unique")
        if self.months_per_batch < 1:
            raise ValueError("months_per_batch must be >= 1")
        if self.max_batches is not None and self.max_batches < 2:
            raise ValueError("max_batches must be >= 2")
        for key in ("liquid", "less_liquid"):
            v = getattr(self.stats, key)
            if v is not None and v not in names:
                raise ValueError(f"stats.{key} names unknown instrument '{v}'")

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "RunConfig":
        changes = {}
        if seed is not None:
            changes["seed"] = seed
            changes["tuning"] = dataclasses.replace(self.tuning, seed=seed)
        if out is not None:
            changes["out"] = out
        return dataclasses.replace(self, **changes) if changes else self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        """Hash of everything that affects results (the output path does not)."""
        d = self.to_dict()
        d.pop("out", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, raw: Any, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for key, value in raw.items():
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[key] = _coerce(value, default, f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    return value


_SECTIONS = {
    "price_levels": PriceLevelConfig, "label": LabelConfig, "features": FeatureConfig, "tuning": TuningSpec,
    "rfe": RFEConfig, "explain": ExplainConfig, "strategy": StrategyConfig, "stats": StatsConfig,
}


def parse_config(raw: Mapping) -> RunConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config root must be a mapping")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    kwargs: dict[str, Any] = {}
    for key, cls in _SECTIONS.items():
        if key in raw:
            kwargs[key] = _build(cls, raw[key], key)
    insts = []
    for k, item in enumerate(raw.get("instruments") or []):
        where = f"instruments[{k}]"
        if not isinstance(item, Mapping):
            raise ConfigError(f"{where}: expected a mapping")
        item = dict(item)
        synth = item.pop("synthetic", None)
        inst = _build(InstrumentConfig, item, where)
        if synth is not None:
            sc = _build(SyntheticConfig, synth, f"{where}.synthetic")
            try:
                sc.validate()
            except ValueError as exc:
                raise ConfigError(f"{where}.synthetic: {exc}") from None
            inst = dataclasses.replace(inst, synthetic=sc)
        if (inst.data is None) == (inst.synthetic is None):
            raise ConfigError(f"{where}: give exactly one of 'data' or 'synthetic'")
        if not inst.tick_size > 0:
            raise ConfigError(f"{where}: tick_size must be positive")
        insts.append(inst)
    kwargs["instruments"] = tuple(insts)
    for key, default in (("seed", 0), ("out", ""), ("months_per_batch", 3), ("max_batches", 0)):
        if key in raw and raw[key] is not None:
            kwargs[key] = _coerce(raw[key], default, key)
    if "ranges" in raw:
        kwargs["ranges"] = _coerce(raw["ranges"], (), "ranges")
        if any(isinstance(r, bool) or not isinstance(r, int) for r in kwargs["ranges"]):
            raise ConfigError("ranges: expected integers")
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from None
    cfg = parse_config(raw or {})
    # relative data paths resolve against the config file
    insts = tuple(dataclasses.replace(i, data=str((path.parent / i.data).resolve())) if i.data else i
                  for i in cfg.instruments)
    return dataclasses.replace(cfg, instruments=insts)
