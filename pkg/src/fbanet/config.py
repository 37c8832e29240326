"""YAML experiment configuration.

Unknown keys are rejected so typos fail loudly instead of silently training
with defaults. ``FBA_SEED`` in the environment overrides ``seed``.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional

import yaml

from .data import BatchSpec, SynthConfig
from .errors import ConfigError
from .model import BackboneConfig


@dataclass
class ContraConfig:
    enabled: bool = True
    alpha: float = 0.25
    proj_dim: int = 64
    rank_direction: str = "hard_first"
    loss: str = "fba"
    temperature: float = 0.1
    feature_tap: str = "encoder"
    mask_resample: str = "area"
    mask_grad: bool = False

    def __post_init__(self):
        if self.loss not in ("fba", "infonce"):
            raise ConfigError(f"contra.loss must be 'fba' or 'infonce', got {self.loss!r}")
        if self.rank_direction not in ("hard_first", "easy_first"):
            raise ConfigError(f"contra.rank_direction must be hard_first|easy_first, got {self.rank_direction!r}")
        if self.feature_tap not in ("encoder", "decoder"):
            raise ConfigError(f"contra.feature_tap must be encoder|decoder, got {self.feature_tap!r}")
        if self.mask_resample not in ("area", "linear"):
            raise ConfigError(f"contra.mask_resample must be area|linear, got {self.mask_resample!r}")
        if self.alpha <= 0 or self.temperature <= 0 or self.proj_dim < 1:
            raise ConfigError("contra.alpha, contra.temperature and contra.proj_dim must be positive")


@dataclass
class LossConfig:
    lambda_contra: float = 1.0
    lambda_consist: float = 1.0
    ramp: str = "gaussian"
    ramp_length: int = 1000

    def __post_init__(self):
        if self.ramp not in ("gaussian", "none"):
            raise ConfigError(f"loss.ramp must be gaussian|none, got {self.ramp!r}")


@dataclass
class DataConfig:
    source: str = "synthetic"
    synth: SynthConfig = field(default_factory=SynthConfig)
    manifest: Optional[str] = None
    labeled_fraction: float = 0.2
    num_test: int = 10
    split_seed: int = 0
    slice_axis: Optional[int] = None

    def __post_init__(self):
        if self.source not in ("synthetic", "manifest"):
            raise ConfigError(f"data.source must be synthetic|manifest, got {self.source!r}")
        if self.source == "manifest" and not self.manifest:
            raise ConfigError("data.manifest is required when data.source is 'manifest'")


@dataclass
class InferenceConfig:
    fusion: str = "mean"
    stride: Optional[int] = None

    def __post_init__(self):
        if self.fusion not in ("mean", "decoder1", "decoder2"):
            raise ConfigError(f"inference.fusion must be mean|decoder1|decoder2, got {self.fusion!r}")


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 2000
    eval_every: int = 200
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.005
    lr_schedule: str = "poly"
    lr_power: float = 0.9
    grad_clip: Optional[float] = 5.0
    num_workers: int = 1
    threads: int = 1
    out_dir: Optional[str] = None
    batch: BatchSpec = field(default_factory=BatchSpec)
    model: BackboneConfig = field(default_factory=BackboneConfig)
    contra: ContraConfig = field(default_factory=ContraConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.lr_schedule not in ("poly", "constant"):
            raise ConfigError(f"lr_schedule must be poly|constant, got {self.lr_schedule!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive or null, got {self.grad_clip}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir", None)
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data: Any, where: str):
    if dataclasses.is_dataclass(data):
        return data
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} in {where or 'top level'}")
    kwargs = {}
    for key, value in data.items():
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            value = _build(tp, value, f"{where}.{key}".lstrip("."))
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_from_dict(data: Optional[Dict[str, Any]], env: Optional[Dict[str, str]] = None) -> TrainConfig:
    data = dict(data or {})
    env = os.environ if env is None else env
    if env.get("FBA_SEED"):
        try:
            data["seed"] = int(env["FBA_SEED"])
        except ValueError as exc:
            raise ConfigError(f"FBA_SEED must be an integer, got {env['FBA_SEED']!r}") from exc
    return _build(TrainConfig, data, "")


def load_yaml(path) -> Dict[str, Any]:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return data or {}


def load_config(path, overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    return config_from_dict(deep_merge(load_yaml(path), overrides or {}))


def synth_from_dict(data: Optional[Dict[str, Any]]) -> SynthConfig:
    return _build(SynthConfig, data, "synth")
