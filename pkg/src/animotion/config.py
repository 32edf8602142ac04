"""Configuration schema shared by every command.

A config is a tree of dataclasses.  ``load_config`` rejects unknown keys at
every level so a typo in a YAML file is a hard error rather than a silently
ignored override.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Mapping

import yaml

SCHEMA_VERSION = 1
PROFILES = ("paper", "desk")


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration entries."""


@dataclass
class LossWeights:
    eq: float = 10.0
    key: float = 100.0
    rec_l1: float = 10.0
    rec_perc: float = 10.0
    gan_g: float = 1.0
    gan_d: float = 1.0
    feat: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name!r} must be nonnegative")


@dataclass
class DetectorConfig:
    num_kp: int = 10
    num_sup: int = 2
    block_expansion: int = 32
    num_blocks: int = 5
    max_features: int = 1024
    # heatmap side = resolution * scale_factor
    scale_factor: float = 0.25
    temperature: float = 0.1
    gt_sigma: float = 0.05
    sup_in_motion: bool = True
    sup_in_equivariance: bool = False

    @property
    def num_total(self) -> int:
        return self.num_kp + self.num_sup


@dataclass
class DenseMotionConfig:
    block_expansion: int = 64
    num_blocks: int = 5
    max_features: int = 512
    scale_factor: float = 0.25
    kp_sigma: float = 0.05


@dataclass
class GeneratorConfig:
    block_expansion: int = 64
    num_down_blocks: int = 5
    max_features: int = 512
    num_bottleneck_blocks: int = 6
    use_texture: bool = True


@dataclass
class DiscriminatorConfig:
    block_expansion: int = 64
    num_layers: int = 4
    max_features: int = 512
    use_instance_norm: bool = True


@dataclass
class ModelConfig:
    resolution: int = 256
    num_channels: int = 3
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    dense_motion: DenseMotionConfig = field(default_factory=DenseMotionConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 20
    learning_rate: float = 0.0002
    betas: tuple = (0.5, 0.999)
    seed: int = 0
    checkpoint_interval: int = 1
    num_repeats: int = 1
    tps_strength: float = 0.005
    tps_affine_strength: float = 0.05
    pyramid: tuple = (256, 128, 64, 32)
    perceptual: str = "vgg19"
    use_gan: bool = True

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.pyramid = tuple(int(s) for s in self.pyramid)
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigError(f"learning_rate must be a positive finite number, got {self.learning_rate}")
        if self.batch_size < 1 or self.num_repeats < 1 or self.checkpoint_interval < 1:
            raise ConfigError("batch_size, num_repeats and checkpoint_interval must be >= 1")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.perceptual not in ("vgg19", "random"):
            raise ConfigError(f"perceptual must be 'vgg19' or 'random', got {self.perceptual!r}")


@dataclass
class EvalConfig:
    embedder: str = "pretrained"
    embedder_seed: int = 1234
    fvd_frames: int = 16


@dataclass
class Config:
    profile: str = "paper"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["betas"] = list(d["train"]["betas"])
        d["train"]["pyramid"] = list(d["train"]["pyramid"])
        return {"schema_version": SCHEMA_VERSION, **d}


def paper_config() -> Config:
    """Hyperparameters exactly as published for the full-scale setting."""
    return Config(profile="paper")


def desk_config() -> Config:
    """Single-workstation profile: 64x64 grayscale, shallow and narrow nets."""
    model = ModelConfig(
        resolution=64,
        num_channels=1,
        detector=DetectorConfig(block_expansion=32, num_blocks=3, max_features=128),
        dense_motion=DenseMotionConfig(block_expansion=32, num_blocks=3, max_features=128),
        generator=GeneratorConfig(block_expansion=16, num_down_blocks=2, max_features=64),
        discriminator=DiscriminatorConfig(block_expansion=16, max_features=128),
    )
    train = TrainConfig(
        epochs=10,
        batch_size=8,
        num_repeats=20,
        pyramid=(64, 32, 16, 8),
        perceptual="random",
    )
    return Config(profile="desk", model=model, train=train,
                  eval=EvalConfig(embedder="fallback"))


def profile_config(profile: str) -> Config:
    if profile == "paper":
        return paper_config()
    if profile == "desk":
        return desk_config()
    raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")


def _merge(obj, overrides: Mapping[str, Any], path: str = ""):
    if not isinstance(overrides, Mapping):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(overrides).__name__}")
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown config key {where!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            updates[key] = _merge(current, value, where)
        else:
            updates[key] = value
    try:
        return dataclasses.replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def apply_overrides(config: Config, overrides: Mapping[str, Any]) -> Config:
    """Return a copy of ``config`` with nested ``overrides`` applied."""
    return _merge(config, overrides)


def config_from_dict(data: Mapping[str, Any]) -> Config:
    data = dict(data)
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}")
    profile = data.get("profile", "paper")
    base = profile_config(profile)
    return _merge(base, data)


def dump_config(config: Config) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=None)


def load_config(text_or_path) -> Config:
    """Load a YAML config from a path or a YAML string.

    Values missing from the file fall back to the selected profile's defaults.
    """
    text = str(text_or_path)
    if "\n" not in text and not text.lstrip().startswith("{"):
        try:
            with open(text) as fh:
                text = fh.read()
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {text_or_path}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return config_from_dict(data)
