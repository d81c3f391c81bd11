"""Versioned YAML configuration shared by all subcommands, with ``section.key=value`` overrides."""

from __future__ import annotations

import copy
import re
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Optional

import yaml

from ..core import LossConfig
from ..curate import CurationConfig
from ..interp import EstimatorDescriptor
from .synth import SyntheticSpec
from .train import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot, such as ``3e-4``, as numbers."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)[eE][-+]?\d+$"),
    list("-+0123456789."),
)


def _load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def default_config() -> dict:
    train = asdict(TrainConfig())
    return {
        "version": CONFIG_VERSION,
        "synth": {**asdict(SyntheticSpec()), "n_clips": 32, "seed": 0, "test_fraction": 0.25},
        "train": train,
        "priors": {"kind": "analytic", "segmentation": None, "detector": None, "pose": None},
        "eval": {"protocol": "arbitrary_t", "split": "test", "method": "model"},
        "curate": {**asdict(CurationConfig()), "flow": "farneback", "test_fraction": 0.2, "seed": 0,
                   "category": "unknown", "review": None},
        "stats": {"bins": 60, "width": 1.0, "flow": "farneback", "threshold": 20.0},
    }


def _merge(base: dict, update: dict, path: str = ""):
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, where + ".")
        elif isinstance(base[key], dict):
            raise ConfigError(f"{where!r} is a section, got {value!r}")
        else:
            base[key] = value


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one ``a.b.c=value`` override; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    nested = _load_yaml(raw) if raw.strip() else None
    for p in reversed(parts):
        nested = {p: nested}
    _merge(cfg, nested)


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> dict:
    cfg = default_config()
    if path:
        data = _load_yaml(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        version = data.pop("version", None)
        if version != CONFIG_VERSION:
            raise ConfigError(f"{path}: unsupported config version {version!r} (expected {CONFIG_VERSION})")
        _merge(cfg, data)
    for o in overrides:
        apply_override(cfg, o)
    return cfg


def dump_config(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    s = {k: v for k, v in cfg["synth"].items() if k not in ("n_clips", "seed", "test_fraction")}
    for k in ("sprite_size", "shapes", "background_velocity"):
        if s.get(k) is not None:
            s[k] = tuple(s[k])
    return SyntheticSpec(**s)


def train_config(cfg: dict) -> TrainConfig:
    t = copy.deepcopy(cfg["train"])
    t["loss"] = LossConfig(**t["loss"])
    t["model"] = EstimatorDescriptor(**t["model"])
    return TrainConfig(**t)


def curation_config(cfg: dict) -> CurationConfig:
    c = {k: v for k, v in cfg["curate"].items() if k in CurationConfig.__dataclass_fields__}
    return CurationConfig(**c)
