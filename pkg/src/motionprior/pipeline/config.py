"""Experiment configuration: typed sections, strict parsing, YAML/JSON round trips."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from ..exceptions import ConfigError

DATA_ROOT_ENV = "MOTIONPRIOR_DATA_ROOT"


@dataclass
class DataConfig:
    source_dir: Optional[str] = None
    fps: float = 10.0
    window: int = 40
    min_seconds: float = 4.0
    max_seconds: float = 8.0
    stride: Optional[int] = None
    holdout_subset: str = "toyC"
    fraction: float = 1.0
    synth_subsets: list = field(default_factory=lambda: ["toyA", "toyB", "toyC"])
    synth_per_subset: int = 12
    max_windows: Optional[int] = None


@dataclass
class PriorConfig:
    latent_dim: int = 256
    n_layers: int = 4
    n_heads: int = 4
    ff_dim: int = 512
    mask_ratio: float = 0.3
    lr: float = 1e-4
    n_epochs: int = 100
    batch_size: int = 8
    decay_epochs: Optional[list] = None
    loss_weights: dict = field(default_factory=dict)
    translation_repr: str = "delta_144"
    dtype: str = "float32"
    grad_clip: float = 1.0
    logvar_init: float = 0.0


@dataclass
class ReuseConfig:
    feature_dim: int = 256
    n_layers: int = 4
    n_heads: int = 4
    ff_dim: int = 512
    lr: float = 1e-4
    n_epochs: int = 100
    batch_size: int = 8
    decay_epochs: Optional[list] = None
    loss_weights: dict = field(default_factory=dict)
    beta_weight: float = 1.0
    center_points: bool = True
    pointnet_hidden: list = field(default_factory=lambda: [64, 128])
    imu_hidden: int = 256
    logvar_init: float = 0.0
    grad_clip: float = 1.0


@dataclass
class SensorSection:
    width: int = 640
    height: int = 480
    focal: float = 525.0
    camera_radius: float = 3.0
    camera_height: float = 1.2
    near: float = 0.05
    depth_points: int = 1024
    lidar_points: int = 256
    lidar_stride: int = 5
    imu_root_relative: bool = False


@dataclass
class EvalConfig:
    imu_ground_truth_shape: bool = True
    inbetween_keyframes: list = field(default_factory=lambda: [0, 39])
    export_frames: int = 40


@dataclass
class ExperimentConfig:
    seed: int = 0
    modality: str = "depth_pc"
    body_model: str = "toy"
    data_root: Optional[str] = None
    run_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    reuse: ReuseConfig = field(default_factory=ReuseConfig)
    sensors: SensorSection = field(default_factory=SensorSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d, "")

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def resolved_data_root(self):
        root = self.data_root or os.environ.get(DATA_ROOT_ENV) or "data"
        return Path(root)

    def dump(self, path):
        path = Path(path)
        text = (json.dumps(self.to_dict(), indent=2) if path.suffix == ".json"
                else yaml.safe_dump(self.to_dict(), sort_keys=False))
        path.write_text(text)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            raw = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            d = json.loads(raw) if path.suffix == ".json" else yaml.safe_load(raw)
        except (ValueError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(d or {})


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING \
            else fields[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def apply_overrides(config, overrides):
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars or lists."""
    d = config.to_dict()
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            node[parts[-1]] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value for {key!r}: {exc}") from exc
    return ExperimentConfig.from_dict(d)


# Desk-scale settings for the toy humanoid on one CPU.
TOY_PRESET = {
    "prior": {"latent_dim": 64, "n_layers": 2, "n_heads": 4, "ff_dim": 128, "lr": 1e-3,
              "n_epochs": 7000, "batch_size": 8, "mask_ratio": 0.3, "logvar_init": -4.0},
    "reuse": {"feature_dim": 64, "n_layers": 2, "n_heads": 4, "ff_dim": 128, "lr": 1e-3,
              "n_epochs": 600, "pointnet_hidden": [32, 64], "imu_hidden": 128},
}

PRESETS = {"default": {}, "toy": TOY_PRESET}


def preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ExperimentConfig.from_dict(json.loads(json.dumps(PRESETS[name])))
