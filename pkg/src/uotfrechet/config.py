"""Experiment configuration: one JSON document mirroring every module's
settings. Unknown keys are rejected at every level."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .barycenter import FixedPointConfig
from .pretrain import VAENFConfig
from .uot import MapFitConfig


class ConfigError(ValueError):
    pass


@dataclass
class WeightsConfig:
    bandwidth: float = 3.0
    kernel: str = "gaussian"
    prune_threshold: float = 0.01
    prune_min_snapshots: int = 8


@dataclass
class PretrainSection:
    enabled: bool = False
    vaenf: VAENFConfig = field(default_factory=VAENFConfig)


@dataclass
class ExperimentConfig:
    seed: int = 0
    tau: float = 5.0
    samples: int = 2000
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    fixed_point: FixedPointConfig = field(default_factory=FixedPointConfig)
    map: MapFitConfig = field(default_factory=MapFitConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)

    def to_dict(self) -> dict:
        return to_dict(self)


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    if isinstance(obj, float) and obj == float("inf"):
        return "inf"
    return obj


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(path + k for k in unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{path}{name}.")
        elif isinstance(current, tuple) or name.startswith("widths") or name.endswith("_widths"):
            if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
                raise ConfigError(f"{path}{name}: expected a list of integers")
            kwargs[name] = tuple(value)
        elif value == "inf":
            kwargs[name] = float("inf")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    return from_dict(data)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
