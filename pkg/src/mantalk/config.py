"""Flat run configuration.

A config file is a flat JSON object whose keys are the field names of
:class:`RunConfig`; CLI flags and ``--set key=value`` overrides use the same
names. Unknown keys are rejected before any work starts.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .audio_features import FeatureConfig
from .errors import ConfigError, MissingInput
from .gen_disc import GeneratorConfig, TalkingHeadModel
from .losses import LossWeights
from .man_norm import AUDIO_BRANCHES, SOURCES, VIDEO_BRANCHES, ManConfig

OUTPUT_ROOT_ENV = "MANTALK_OUTPUT_ROOT"


@dataclass
class RunConfig:
    # model
    frame_size: int = 32
    base_channels: int = 32
    min_channels: int = 16
    n_man_blocks: int = 8
    flow_or_heatmap: str = "optical_flow"
    video_branch: str = "conv2d_eca"
    audio_branch: str = "lstm"
    enabled_sources: tuple = SOURCES
    channel_width: int = 32
    shared_gate: bool = False
    spectral_norm: bool = True
    disc_scales: int = 2
    disc_channels: int = 32
    predictor_channels: int = 16
    # features
    pitch_lo: float = 0.0
    pitch_hi: float = 400.0
    energy_lo: float = 0.0
    energy_hi: float | None = None  # None: max over the training split
    # losses
    w_gan: float = 1.0
    w_cam: float = 1.0
    w_recon: float = 10.0
    w_fm: float = 10.0
    w_perc: float = 1.0
    w_pred: float = 10.0
    saturating_gan: bool = False
    # optimization
    steps: int = 300
    batch_size: int = 4
    lr: float = 0.002
    beta1: float = 0.0
    beta2: float = 0.9
    lr_decay_start: float = 0.5  # fraction of steps after which lr falls linearly to 0; 1.0 keeps it constant
    seed: int = 0
    checkpoint_every: int = 100
    log_every: int = 10
    # data
    synthetic: bool = True
    data_root: str | None = None
    n_clips: int = 8
    clip_seconds: float = 2.0
    head_motion: bool = False
    # output
    out_dir: str | None = None

    def validate(self) -> "RunConfig":
        if self.video_branch not in VIDEO_BRANCHES:
            raise ConfigError(f"video_branch must be one of {VIDEO_BRANCHES}")
        if self.audio_branch not in AUDIO_BRANCHES:
            raise ConfigError(f"audio_branch must be one of {AUDIO_BRANCHES}")
        bad = set(self.enabled_sources) - set(SOURCES)
        if bad or not self.enabled_sources:
            raise ConfigError(f"enabled_sources must be a non-empty subset of {SOURCES}")
        for name in ("steps", "batch_size", "n_clips", "checkpoint_every", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.lr_decay_start <= 1.0:
            raise ConfigError("lr_decay_start must lie in [0, 1]")
        if self.clip_seconds <= 0:
            raise ConfigError("clip_seconds must be positive")
        if not self.synthetic and not self.data_root:
            raise ConfigError("data_root is required when synthetic is false")
        if self.pitch_hi <= self.pitch_lo:
            raise ConfigError("pitch_hi must exceed pitch_lo")
        try:
            self.generator_config()
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def man_config(self) -> ManConfig:
        return ManConfig(
            video_branch=self.video_branch,
            audio_branch=self.audio_branch,
            enabled_sources=tuple(self.enabled_sources),
            channel_width=self.channel_width,
            shared_gate=self.shared_gate,
        )

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            frame_size=self.frame_size,
            base_channels=self.base_channels,
            min_channels=self.min_channels,
            n_man_blocks=self.n_man_blocks,
            flow_or_heatmap=self.flow_or_heatmap,
            man=self.man_config(),
            spectral_norm=self.spectral_norm,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_gan, self.w_cam, self.w_recon, self.w_fm, self.w_perc, self.w_pred)

    def feature_config(self, energy_hi: float | None = None) -> FeatureConfig:
        hi = energy_hi if energy_hi is not None else self.energy_hi
        if hi is None:
            hi = FeatureConfig().energy_range[1]
        return FeatureConfig(pitch_range=(self.pitch_lo, self.pitch_hi), energy_range=(self.energy_lo, float(hi)))

    def build_model(self, feature_cfg: FeatureConfig | None = None) -> TalkingHeadModel:
        return TalkingHeadModel(
            self.generator_config(),
            disc_scales=self.disc_scales,
            disc_channels=self.disc_channels,
            predictor_channels=self.predictor_channels,
            feature_cfg=feature_cfg or self.feature_config(),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enabled_sources"] = list(self.enabled_sources)
        return d

    def output_dir(self) -> Path:
        if self.out_dir:
            return Path(self.out_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / f"run-seed{self.seed}"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    default = getattr(RunConfig(), key)
    if isinstance(value, str):
        if key == "enabled_sources":
            return tuple(s.strip() for s in value.split(",") if s.strip())
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{key}: expected a boolean, got {value!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float) or key == "energy_hi":
            return None if value.lower() in ("none", "null") else float(value)
        if default is None and value.lower() in ("none", "null"):
            return None
        return value
    if key == "enabled_sources":
        return tuple(value)
    return value


def config_from_dict(values: dict, base: RunConfig | None = None) -> RunConfig:
    unknown = sorted(set(values) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        coerced = {k: _coerce(k, v) for k, v in values.items()}
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return replace(base or RunConfig(), **coerced)


def load_config(path: str | Path | None, overrides: list[str] | None = None, **direct) -> RunConfig:
    """Read a config file (optional), apply ``key=value`` overrides and direct kwargs, validate."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingInput(f"config file not found: {p}")
        try:
            values = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{p}: expected a flat JSON object")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    values.update({k: v for k, v in direct.items() if v is not None})
    return config_from_dict(values).validate()


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
