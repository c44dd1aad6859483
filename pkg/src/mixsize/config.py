"""Run configuration: typed sections, a flat dotted-key file format and overrides.

A config file is TOML restricted to dotted keys, e.g.::

    model.depth = 8
    regime.preset = "cifar28"
    regime.mode = "D_plus"
    optim.lr = 0.1

Unknown keys are rejected. ``--set key=value`` overrides use the same syntax.
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any, Dict, List, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .sched import MODES, STRATEGIES, MixSizeDistribution, preset, validate


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    depth: int = 8
    width: int = 16
    classes: int = 10


@dataclass
class DataSection:
    path: str = ""
    synthetic: bool = True
    subset: int = 0
    n_train: int = 5000
    n_test: int = 1000
    seed: int = 0


@dataclass
class RegimeSection:
    enabled: bool = True
    preset: str = ""
    entries: str = "32:1.0"
    mode: str = "fixed"
    strategy: str = "per_step"
    # 0 = take the preset's value (32 / 64 / 1 for explicit entries)
    base_size: int = 0
    base_batch: int = 0
    base_duplicates: int = 0


@dataclass
class OptimSection:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    smoothing: str = "auto"  # auto = on for B_plus only
    alpha: float = 0.99
    smooth_before_momentum: bool = True
    schedule: str = "cosine"
    milestones: List[int] = field(default_factory=list)
    gamma: float = 0.1
    scale_lr: str = "auto"  # auto = linear scaling in B_plus only


@dataclass
class RunSection:
    epochs: int = 30
    seed: int = 0
    precision: str = "float32"
    out_dir: str = "runs/default"
    metrics_flush: int = 50
    checkpoint_every_epoch: bool = True


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    regime: RegimeSection = field(default_factory=RegimeSection)
    optim: OptimSection = field(default_factory=OptimSection)
    run: RunSection = field(default_factory=RunSection)

    def distribution(self) -> MixSizeDistribution:
        r = self.regime
        base = {k: v for k, v in (("base_size", r.base_size), ("base_batch", r.base_batch),
                                  ("base_duplicates", r.base_duplicates)) if v}
        if r.preset:
            return preset(r.preset, r.mode, **base)
        return validate(MixSizeDistribution.parse(r.entries, mode=r.mode, **base))

    def smoothing_enabled(self) -> bool:
        return _auto(self.optim.smoothing, self.regime.mode == "B_plus")

    def lr_scaling_enabled(self) -> bool:
        return _auto(self.optim.scale_lr, self.regime.mode == "B_plus")

    def validate(self) -> "RunConfig":
        if self.regime.mode not in MODES:
            raise ConfigError(f"regime.mode must be one of {MODES}")
        if self.regime.strategy not in STRATEGIES:
            raise ConfigError(f"regime.strategy must be one of {STRATEGIES}")
        if self.run.precision not in ("float32", "float64"):
            raise ConfigError("run.precision must be float32 or float64")
        if self.run.epochs < 1:
            raise ConfigError("run.epochs must be >= 1")
        try:
            self.distribution()
        except (ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e
        return self

    def to_flat(self) -> Dict[str, Any]:
        return {f"{sec}.{k}": v for sec, d in asdict(self).items() for k, v in d.items()}


def _auto(value, default: bool) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).lower()
    if v == "auto":
        return default
    if v in ("true", "on", "1", "yes"):
        return True
    if v in ("false", "off", "0", "no"):
        return False
    raise ConfigError(f"expected auto/true/false, got {value!r}")


def _set(cfg: RunConfig, key: str, value: Any) -> None:
    sec, _, name = key.partition(".")
    section = getattr(cfg, sec, None)
    if not is_dataclass(section) or not name:
        raise ConfigError(f"unknown config key {key!r}")
    if name not in {f.name for f in fields(section)}:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(section, name)
    try:
        if isinstance(current, bool):
            value = _auto(value, current)
        elif isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{key} expects an integer")
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        elif isinstance(current, list):
            value = [int(v) for v in (value if isinstance(value, list) else str(value).replace(",", " ").split())]
        elif isinstance(current, str):
            value = str(value).lower() if isinstance(value, bool) else str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {value!r}") from e
    setattr(section, name, value)


def _flatten(d: dict, prefix: str = "") -> Dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            out.update(_flatten(v, key))
        else:
            out[key] = v
    return out


def parse_config_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or RunConfig()
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config parse error: {e}") from e
    for k, v in _flatten(doc).items():
        _set(cfg, k, v)
    return cfg


def load_config(path=None, overrides: Optional[List[str]] = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = parse_config_text(fh.read(), cfg)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    for item in overrides or []:
        apply_override(cfg, item)
    return cfg.validate()


def apply_override(cfg: RunConfig, item: str) -> None:
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key, raw = key.strip(), raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    _set(cfg, key, value)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_flat().items():
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, str):
            s = '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        else:
            s = repr(v)
        lines.append(f"{k} = {s}")
    return "\n".join(lines) + "\n"
