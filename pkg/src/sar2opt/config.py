"""Run configuration.

One YAML file drives training, sampling, and schedule inspection. Parsing
is strict: unknown keys anywhere in the tree are rejected so typos cannot
silently fall back to defaults. The fully-resolved config (all defaults
applied) is echoed into the run directory at training start.

Schema (config_version 1), all keys optional unless noted:

    config_version: 1
    data:
      root: <path>            # required for training
      tile_size: 64
      sar_channels: 1
      split_seed: 0
      train_fraction: 0.875
      val_fraction: 0.125
      sar_stretch: null       # or [low_pct, high_pct]
    schedule:
      T: 1000
      beta_start: 1.0e-4
      beta_end: 0.02
      variance_mode: beta     # or beta_tilde
    model:
      base_channels: 32
      channel_mults: [1, 2, 2]
      blocks_per_level: 1
      time_dim: 128
      attention: false
    loss:
      color_weight: 1.0
      blur_kernel_size: 21
      blur_sigma: 3.0
    optimizer:
      beta1: 0.9
      beta2: 0.999
      eps: 1.0e-8
      weight_decay: 0.01
      peak_lr: 5.0e-5
      warmup_steps: null      # default: 5% of iterations, at least 1
    training:
      iterations: 2000
      batch_size: 8
      seed: 0
      log_interval: 1
      checkpoint_interval: 500
      ema: false
      ema_decay: 0.999
    run:
      dir: runs/default
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .diffusion import NoiseSchedule, make_linear_schedule
from .losses import BlurSpec
from .unet import ModelConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Malformed config file: bad value, wrong type, or unknown key."""


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None
    tile_size: int = 64
    sar_channels: int = 1
    split_seed: int = 0
    train_fraction: float = 0.875
    val_fraction: float = 0.125
    sar_stretch: tuple[float, float] | None = None

    def __post_init__(self):
        if self.tile_size < 8:
            raise ConfigError(f"data.tile_size must be at least 8, got {self.tile_size}")
        if self.sar_channels < 1:
            raise ConfigError(f"data.sar_channels must be positive, got {self.sar_channels}")
        total = self.train_fraction + self.val_fraction
        if self.train_fraction <= 0 or self.val_fraction < 0 or abs(total - 1.0) > 1e-6:
            raise ConfigError(
                "data.train_fraction and data.val_fraction must be a partition of 1, "
                f"got {self.train_fraction} and {self.val_fraction}"
            )
        if self.sar_stretch is not None:
            object.__setattr__(self, "sar_stretch", tuple(float(v) for v in self.sar_stretch))
            lo, hi = self.sar_stretch
            if not (0 <= lo < hi <= 100):
                raise ConfigError(f"data.sar_stretch must be [low, high] percentiles, got {self.sar_stretch}")

    def fractions(self) -> dict[str, float]:
        return {"train": self.train_fraction, "val": self.val_fraction}


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1.0e-4
    beta_end: float = 0.02
    variance_mode: str = "beta"

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"schedule.T must be at least 1, got {self.T}")
        if not (0 < self.beta_start <= self.beta_end < 1):
            raise ConfigError(
                "schedule must satisfy 0 < beta_start <= beta_end < 1, "
                f"got {self.beta_start} and {self.beta_end}"
            )
        if self.variance_mode not in ("beta", "beta_tilde"):
            raise ConfigError(
                f"schedule.variance_mode must be 'beta' or 'beta_tilde', got {self.variance_mode!r}"
            )

    def build(self) -> NoiseSchedule:
        return make_linear_schedule(
            T=self.T,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            variance_mode=self.variance_mode,
        )


@dataclass(frozen=True)
class ModelSection:
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    blocks_per_level: int = 1
    time_dim: int = 128
    attention: bool = False

    def build(self, sar_channels: int) -> ModelConfig:
        return ModelConfig(
            base_channels=self.base_channels,
            channel_mults=tuple(self.channel_mults),
            blocks_per_level=self.blocks_per_level,
            time_dim=self.time_dim,
            sar_channels=sar_channels,
            attention=self.attention,
        )


@dataclass(frozen=True)
class LossConfig:
    color_weight: float = 1.0
    blur_kernel_size: int = 21
    blur_sigma: float = 3.0

    def __post_init__(self):
        if self.color_weight < 0:
            raise ConfigError(f"loss.color_weight must be non-negative, got {self.color_weight}")

    def blur_spec(self) -> BlurSpec:
        return BlurSpec(kernel_size=self.blur_kernel_size, sigma=self.blur_sigma)


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0e-8
    weight_decay: float = 0.01
    peak_lr: float = 5.0e-5
    warmup_steps: int | None = None

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"optimizer betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.peak_lr <= 0:
            raise ConfigError(f"optimizer.peak_lr must be positive, got {self.peak_lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"optimizer.weight_decay must be non-negative, got {self.weight_decay}")
        if self.warmup_steps is not None and self.warmup_steps < 1:
            raise ConfigError(f"optimizer.warmup_steps must be at least 1, got {self.warmup_steps}")


@dataclass(frozen=True)
class TrainingConfig:
    iterations: int = 2000
    batch_size: int = 8
    seed: int = 0
    log_interval: int = 1
    checkpoint_interval: int = 500
    ema: bool = False
    ema_decay: float = 0.999

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"training.iterations must be positive, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"training.batch_size must be positive, got {self.batch_size}")
        if self.log_interval < 1 or self.checkpoint_interval < 1:
            raise ConfigError("training.log_interval and training.checkpoint_interval must be positive")
        if not (0 < self.ema_decay < 1):
            raise ConfigError(f"training.ema_decay must lie in (0, 1), got {self.ema_decay}")


@dataclass(frozen=True)
class RunConfig:
    dir: str = "runs/default"


_SECTIONS = {
    "data": DataConfig,
    "schedule": ScheduleConfig,
    "model": ModelSection,
    "loss": LossConfig,
    "optimizer": OptimizerConfig,
    "training": TrainingConfig,
    "run": RunConfig,
}


@dataclass(frozen=True)
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def warmup_steps(self) -> int:
        if self.optimizer.warmup_steps is not None:
            return self.optimizer.warmup_steps
        return max(1, round(0.05 * self.training.iterations))

    def model_config(self) -> ModelConfig:
        return self.model.build(self.data.sar_channels)

    def to_dict(self) -> dict:
        out: dict = {"config_version": CONFIG_VERSION}
        for name, section in dataclasses.asdict(self).items():
            for k, v in section.items():
                if isinstance(v, tuple):
                    section[k] = list(v)
            out[name] = section
        out["optimizer"]["warmup_steps"] = self.warmup_steps()
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _build_section(name: str, cls, mapping) -> object:
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"section {name!r} must be a mapping, got {type(mapping).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    try:
        return cls(**mapping)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value in section {name!r}: {e}") from e


def parse_config(raw: dict | None) -> TrainConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    raw = dict(raw)
    version = raw.pop("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config_version {version} is not supported (expected {CONFIG_VERSION})")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level section(s): {', '.join(unknown)}")
    sections = {
        name: _build_section(name, cls, raw.get(name)) for name, cls in _SECTIONS.items()
    }
    return TrainConfig(**sections)


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    return parse_config(raw)
