"""Dataclass configuration groups and the flat-JSON experiment config.

The on-disk format is a single flat JSON object; every key maps to exactly
one dataclass field below, unknown keys are fatal.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or unknown configuration values."""


@dataclass
class SceneConfig:
    """Synthetic-video generator settings (pixel units)."""

    image_size: int = 128
    n_frames: int = 12
    n_distractors: int = 5
    min_target_size: float = 16.0
    max_target_size: float = 40.0
    min_aspect: float = 0.5
    max_aspect: float = 2.0
    max_speed: float = 2.5
    max_scale_step: float = 0.04
    background_cells: int = 16
    pixel_noise: float = 0.02

    def validate(self) -> None:
        if self.image_size < 32:
            raise ConfigError("image_size must be >= 32")
        if self.n_frames < 4:
            raise ConfigError("n_frames must be >= 4")
        longest = self.max_target_size * max(self.max_aspect, 1.0 / self.min_aspect) ** 0.5
        if longest >= self.image_size - 4:
            raise ConfigError("target does not fit inside the frame")
        if not 0.0 <= self.max_scale_step < 0.5:
            raise ConfigError("max_scale_step must be in [0, 0.5)")


@dataclass
class NetConfig:
    """Encoder / proposal-head sizes. Defaults give an 8x8 template kernel,
    16x16 search feature and a 9x9 response grid (405 anchors)."""

    image_channels: int = 3
    channels: int = 16
    stride: int = 4
    template_size: int = 32
    search_size: int = 64
    anchor_scale: float = 4.0
    anchor_ratios: tuple[float, ...] = (0.33, 0.5, 1.0, 2.0, 3.0)
    context_factor: float = 2.0

    @property
    def template_feat(self) -> int:
        return self.template_size // self.stride

    @property
    def search_feat(self) -> int:
        return self.search_size // self.stride

    @property
    def response_size(self) -> int:
        return self.search_feat - self.template_feat + 1

    @property
    def n_anchors(self) -> int:
        return self.response_size**2 * len(self.anchor_ratios)

    def validate(self) -> None:
        if self.template_size % self.stride or self.search_size % self.stride:
            raise ConfigError("patch sizes must be divisible by the stride")
        if not self.anchor_ratios or any(r <= 0 for r in self.anchor_ratios):
            raise ConfigError("anchor_ratios must be positive and non-empty")


@dataclass
class TrainConfig:
    """Loss weights, schedules and ablation switches."""

    lambda1: float = 10.0
    lambda2: float = 1.2
    lambda_cycle: float = 0.5
    reweight_gamma: float = 5.0
    reweight_alpha: float = 7.0
    beta_factor: float = 0.8
    mask_threshold: float = 0.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    atss_topk: int = 15
    batch_size: int = 2
    legacy_epochs: int = 2
    cycle_epochs: int = 2
    steps_per_epoch: int = 100
    lr_start: float = 1e-3
    lr_end: float = 5e-5
    grad_clip: float = 5.0
    momentum: float = 0.9
    n_search: int = 3
    frame_gap: int = 2
    jitter_level: float = 0.2
    shift_aug: float = 0.25
    scale_aug_low: float = 0.8
    scale_aug_high: float = 1.2
    reweight_enabled: bool = True
    detach_boxes: bool = False
    residual: bool = False
    long_term: bool = True
    short_term: bool = True
    attention_axis: str = "search"
    seed: int = 0
    eval_sequences: int = 6

    def validate(self) -> None:
        if self.reweight_gamma <= 1.0:
            raise ConfigError("reweight_gamma must be > 1")
        if self.reweight_alpha <= 1.0:
            raise ConfigError("reweight_alpha must be > 1")
        if not 0.0 < self.beta_factor <= 1.0:
            raise ConfigError("beta_factor must be in (0, 1]")
        if not 0.0 <= self.lambda_cycle <= 1.0:
            raise ConfigError("lambda_cycle must be in [0, 1]")
        if self.n_search < 1:
            raise ConfigError("n_search must be >= 1")
        if self.attention_axis not in ("search", "template"):
            raise ConfigError("attention_axis must be 'search' or 'template'")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ConfigError("learning rates must be positive")


@dataclass
class RuntimeConfig:
    """Online tracking settings."""

    memory_enabled: bool = False
    lambda_memory: float = 0.3
    queue_len: int = 6
    hidden_interval: int = 10
    window_weight: float = 0.1
    scale_damping: float = 0.3
    size_penalty: float = 0.2
    online_threshold_factor: float = 0.5

    def validate(self) -> None:
        if not 0.0 <= self.lambda_memory <= 1.0:
            raise ConfigError("lambda_memory must be in [0, 1]")
        if self.queue_len < 1:
            raise ConfigError("queue_len must be >= 1")
        if self.hidden_interval < 1:
            raise ConfigError("hidden_interval must be >= 1")


@dataclass
class FullConfig:
    """All groups plus artifact paths; mirrors the flat JSON document."""

    scene: SceneConfig = field(default_factory=SceneConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    data_dir: str = ""
    checkpoint_path: str = ""
    results_path: str = ""
    n_sequences: int = 8

    _TOP_KEYS = ("data_dir", "checkpoint_path", "results_path", "n_sequences")

    def validate(self) -> None:
        self.scene.validate()
        self.net.validate()
        self.train.validate()
        self.runtime.validate()

    def to_flat(self) -> dict:
        out: dict = {}
        for group in (self.scene, self.net, self.train, self.runtime):
            for f in dataclasses.fields(group):
                v = getattr(group, f.name)
                out[f.name] = list(v) if isinstance(v, tuple) else v
        for k in self._TOP_KEYS:
            out[k] = getattr(self, k)
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "FullConfig":
        cfg = cls()
        owners: dict[str, tuple[object, str, type]] = {}
        for group in (cfg.scene, cfg.net, cfg.train, cfg.runtime):
            for f in dataclasses.fields(group):
                owners[f.name] = (group, f.name, f.type)
        for key, value in flat.items():
            if key in cls._TOP_KEYS:
                setattr(cfg, key, value)
                continue
            if key not in owners:
                raise ConfigError(f"unknown config key: {key!r}")
            group, name, _ = owners[key]
            current = getattr(group, name)
            if isinstance(current, tuple):
                value = tuple(value)
            elif isinstance(current, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"config key {key!r} must be a boolean")
            elif isinstance(current, int) and not isinstance(value, bool):
                if isinstance(value, float) and not value.is_integer():
                    raise ConfigError(f"config key {key!r} must be an integer")
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
            setattr(group, name, value)
        cfg.validate()
        return cfg

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FullConfig":
        try:
            flat = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config file {path}: {e}") from e
        if not isinstance(flat, dict):
            raise ConfigError("config file must contain a JSON object")
        return cls.from_flat(flat)
