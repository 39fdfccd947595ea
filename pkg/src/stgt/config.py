"""Pipeline configuration: nested dataclasses loaded from YAML or JSON.

Unknown keys are rejected at every level. ``resolved()`` returns the complete
configuration as plain data so it can be written next to every output.
"""
from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass
class SynthSection:
    n_substations: int = 10
    years: int = 3
    propagation_strength: float = 2.0
    base_rate: float = 0.028
    seasonal_amplitude: float = 0.5
    burst_mean: float = 4.0
    frailty_sd: float = 0.1
    start: str = "2020-01-01"


@dataclass
class DataSection:
    tau_km: float = 50.0
    lookback: int = 14
    min_days: int = 180
    min_failures: int = 100
    train_years: list = field(default_factory=lambda: [2020])
    val_years: list = field(default_factory=lambda: [2021])
    test_years: list = field(default_factory=lambda: [2022])
    holdout: list = field(default_factory=list)


@dataclass
class FeatureSection:
    temporal: bool = True
    spatial: bool = True
    topology: bool = True
    cause: bool = False
    time_counter: bool = True
    select_iters: int = 100
    select_trees: int = 10
    top_k: int = 15
    stability: float = 0.8


@dataclass
class AugmentSection:
    enabled: bool = True
    noise_sigma: float = 0.05
    smote_k: int = 5
    target_ratio: float = 0.30


@dataclass
class ModelSection:
    d: int = 64
    heads: int = 8
    n_blocks: int = 2
    ff_mult: int = 4
    static_hidden: int = 64
    head_hidden: list = field(default_factory=lambda: [64, 32])
    mask_mode: str = "post_softmax"


@dataclass
class LossSection:
    alpha: float = 0.3
    gamma: float = 2.0


@dataclass
class TrainSection:
    batch_size: int = 512
    max_epochs: int = 100
    patience: int = 20
    grad_clip_norm: float = 1.0
    lr: float = 1e-3
    weighted_sampling: bool = True
    weight_decay: float = 0.0


@dataclass
class GbtSection:
    max_depth: int = 6
    learning_rate: float = 0.1
    n_estimators: int = 100
    subsample: float = 0.8
    class_weighting: bool = True


@dataclass
class EvalSection:
    boot_iters: int = 1000
    f_beta: float = 2.0
    cv_folds: int = 5


@dataclass
class PipelineConfig:
    seed: int = 0
    synth: SynthSection = field(default_factory=SynthSection)
    data: DataSection = field(default_factory=DataSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    gbt: GbtSection = field(default_factory=GbtSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def resolved(self) -> dict:
        return dataclasses.asdict(self)

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.seed, stage)

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        return from_dict(_merge(self.resolved(), overrides))


def stage_seed(root: int, stage: str) -> int:
    """Derive an independent 32-bit seed for ``stage`` from the root seed."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join((path + '.' if path else '') + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        key = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        else:
            kwargs[name] = _coerce(default, value, key)
    return cls(**kwargs)


def _coerce(default, value, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data or {})


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix.lower() in (".yaml", ".yml"):
        try:
            import yaml
        except ImportError as exc:  # pragma: no cover
            raise ConfigError("reading YAML configs needs pyyaml; use JSON instead") from exc
        data = yaml.safe_load(text) or {}
    else:
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def dump_config(cfg: PipelineConfig, path):
    with open(path, "w") as fh:
        json.dump(cfg.resolved(), fh, indent=2, sort_keys=True)
        fh.write("\n")
