"""Run configuration: one YAML document with nested sections.

Unknown keys are rejected by their dotted path. Command-line overrides use
the same dotted paths (``train.alpha=0.5``); values are parsed as YAML
scalars or lists.
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class ModelSection:
    variant: str = "vanilla"
    image_size: int = 16
    patch_size: int = 4
    in_channels: int = 3
    num_classes: int = 4
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    # staged variant
    embed_dims: list = field(default_factory=lambda: [16, 32])
    depths: list = field(default_factory=lambda: [2, 2])
    stage_heads: list = field(default_factory=lambda: [1, 2])
    mlp_ratios: list = field(default_factory=lambda: [4, 4])
    sr_ratios: list = field(default_factory=lambda: [2, 1])
    patch_kernels: list = field(default_factory=lambda: [3, 3])
    patch_strides: list = field(default_factory=lambda: [2, 2])
    init_std: float = 0.02
    seed: int = 0


@dataclass
class DataSection:
    source: str = "synth"  # synth | cifar10
    train_paths: list = field(default_factory=list)
    eval_paths: list = field(default_factory=list)
    classes: list | None = None
    n_train: int = 1024
    n_eval: int = 512
    seed: int = 0
    labels: str = "labeler"  # labeler | teacher | random (synthetic data only)
    labeler: str | None = None  # checkpoint used when labels=teacher


@dataclass
class ScoreSection:
    proxy_size: int = 200
    proxy_seed: int = 0
    batch_size: int = 256
    workers: int = 1


@dataclass
class PruneSection:
    ratio: float | None = None
    embed_dim: Any = None
    attn_dim: int | None = None
    heads: int | None = None
    ffn_dim: int | None = None
    sr_dim: int | None = None
    strategy: int = 1
    components: list = field(default_factory=lambda: [1, 2, 3, 4])


@dataclass
class BlocksSection:
    target_depth: int | None = None
    mode: str = "progressive"  # progressive | one_shot


@dataclass
class TrainSection:
    strategy: str = "soft"
    alpha: float = 1.0
    beta: float = 1.0
    epochs: int = 10
    lr: float = 5e-4
    weight_decay: float = 0.05
    batch_size: int = 64
    seed: int = 0
    warmup_frac: float = 0.05
    augment: bool = False


@dataclass
class AblateSection:
    study: str = "distill"  # heads | distill | pipeline
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    teacher_epochs: int = 30
    epochs: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    dtype: str = "float64"
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    score: ScoreSection = field(default_factory=ScoreSection)
    prune: PruneSection = field(default_factory=PruneSection)
    blocks: BlocksSection = field(default_factory=BlocksSection)
    train: TrainSection = field(default_factory=TrainSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise ConfigError(f"unknown config key {where!r}")
        default = getattr(cls(), key)
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value or {}, where)
        else:
            kwargs[key] = _coerce(value, default, where)
    return cls(**kwargs)


def _coerce(value, default, where: str):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, (int, float)):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, str) and isinstance(value, str):
        return value
    if isinstance(default, list) and isinstance(value, list):
        return value
    raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def config_from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    return config_from_dict(_yaml11_float(data))


_EXP_FLOAT = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+$")


def _yaml11_float(value):
    """YAML 1.1 reads ``1e-3`` (no dot) as a string; turn such strings into floats."""
    if isinstance(value, str) and _EXP_FLOAT.match(value.strip()):
        return float(value)
    if isinstance(value, list):
        return [_yaml11_float(v) for v in value]
    if isinstance(value, dict):
        return {k: _yaml11_float(v) for k, v in value.items()}
    return value


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Return a copy of ``cfg`` with ``section.key=value`` overrides applied."""
    data = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError:
            value = raw
        value = _yaml11_float(value)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config_from_dict(data)
