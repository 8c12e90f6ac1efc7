"""Experiment configuration: one nested structure, YAML round-trip, dotted
overrides, and a content hash stamped into every output file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

import yaml

from .errors import DomainError
from .training import TrainConfig
from .urllc import UrllcConfig

OUT_DIR_ENV = "SIZEGEN_OUT"


@dataclass(frozen=True)
class BvConfig:
    k_max: int = 50
    samples: int = 4000
    epochs: int = 1000
    batch_size: int = 100
    lr_base: float = 0.001
    lr_decay: float = 0.001
    label_tol_rel: float = 1e-3
    label_draws: int = 2000
    hidden: tuple = (200, 100, 100, 50)
    val_fraction: float = 0.1
    mse_variance_target: float = 0.01

    def __post_init__(self):
        if self.k_max < 1 or self.samples < 1:
            raise DomainError("bv config needs k_max >= 1 and samples >= 1")


@dataclass(frozen=True)
class WmmseConfig:
    k_list: tuple = (10, 50)
    realizations: int = 1000
    delta: float = 0.1
    g_grid: tuple = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    p_max: float = 1.0
    noise: float = 1.0
    tol: float = 1e-6
    max_iters: int = 500
    gain_model: str = "rayleigh_amplitude"
    binary_k_list: tuple = (10,)
    binary_realizations: int = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    system: UrllcConfig = field(default_factory=UrllcConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bv: BvConfig = field(default_factory=BvConfig)
    wmmse: WmmseConfig = field(default_factory=WmmseConfig)
    m_penn_eps_d: float = 5e-6
    fnn_eps_d: float = 2e-6
    seed: int = 1
    threads: int = 1
    out_dir: str = ""

    def resolved_out_dir(self):
        return self.out_dir or os.environ.get(OUT_DIR_ENV, "out")


_SECTIONS = {"system": UrllcConfig, "train": TrainConfig, "bv": BvConfig, "wmmse": WmmseConfig}


def _coerce(value, reference):
    """Parse a raw YAML/CLI value into the type of the reference default."""
    if isinstance(reference, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1", "yes"):
            return True
        if str(value).lower() in ("false", "0", "no"):
            return False
        raise DomainError(f"cannot parse boolean from {value!r}")
    if isinstance(reference, int) and not isinstance(reference, bool):
        return int(value)
    if isinstance(reference, float):
        return float(value)
    if isinstance(reference, tuple):
        if isinstance(value, str):
            parts = [p for p in value.split(",") if p != ""]
        elif isinstance(value, (list, tuple)):
            parts = list(value)
        else:
            parts = [value]
        inner = reference[0] if reference else 1
        return tuple(_coerce(p, inner) for p in parts)
    return str(value)


def _build_section(cls, data, where):
    defaults = cls()
    known = {f.name: getattr(defaults, f.name) for f in fields(cls)}
    kwargs = {}
    for key, value in (data or {}).items():
        if key not in known:
            raise DomainError(f"unknown config key {where}.{key}")
        kwargs[key] = _coerce(value, known[key])
    return cls(**{**{k: v for k, v in known.items()}, **kwargs})


def from_dict(data):
    data = dict(data or {})
    kwargs = {}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build_section(cls, data.pop(name, {}), name)
    defaults = ExperimentConfig()
    for key in list(data):
        if not hasattr(defaults, key):
            raise DomainError(f"unknown config key {key}")
        kwargs[key] = _coerce(data.pop(key), getattr(defaults, key))
    return ExperimentConfig(**kwargs)


def load(path=None):
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise DomainError("config file must hold a mapping")
    return from_dict(data)


def to_dict(cfg):
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        return obj

    return convert(cfg)


def dump(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=True)


def apply_overrides(cfg, pairs):
    """Apply dotted key=value overrides, e.g. train.epochs=100."""
    data = to_dict(cfg)
    for pair in pairs:
        if "=" not in pair:
            raise DomainError(f"override must look like section.key=value, got {pair!r}")
        path, value = pair.split("=", 1)
        parts = path.split(".")
        node = data
        for part in parts[:-1]:
            if part not in node:
                raise DomainError(f"unknown config key {path}")
            node = node[part]
        if parts[-1] not in node:
            raise DomainError(f"unknown config key {path}")
        node[parts[-1]] = value
    return from_dict(data)


def config_hash(cfg):
    """Hash of the semantic configuration: where outputs go and how many
    workers run must not change results, so they are excluded."""
    data = to_dict(cfg)
    data.pop("out_dir", None)
    data.pop("threads", None)
    canonical = json.dumps(data, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]
