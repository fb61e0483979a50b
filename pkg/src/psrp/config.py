"""Experiment configuration: nested dataclasses, YAML loading and ``--set`` overrides."""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

ATTENTION_KINDS = ("none", "cbam", "cbam_min", "channel_only")

# Max-regression-distance buckets for an 800 px input; rescaled for other sizes.
REFERENCE_INPUT_SIZE = 800
DEFAULT_RANGES = [[0.0, 64.0], [64.0, 128.0], [128.0, 256.0], [256.0, None]]


@dataclass
class BackboneConfig:
    kind: str = "tiny"
    base_width: int = 16
    out_channels: int = 256

    def validate(self) -> None:
        if self.kind not in ("tiny", "resnet50-adapter"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.base_width < 8:
            raise ConfigError(f"backbone.base_width must be >= 8, got {self.base_width}")
        if self.out_channels < 1:
            raise ConfigError("backbone.out_channels must be positive")


@dataclass
class SedamConfig:
    width: int = 640
    attention: str = "channel_only"
    fusion: str = "add"
    reduction: int = 16
    spatial_kernel: int = 7
    shared_mlp: bool = True

    def validate(self) -> None:
        if self.width % 32:
            raise ConfigError(f"sedam.width must be divisible by 32, got {self.width}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention {self.attention!r}; expected one of {ATTENTION_KINDS}")
        if self.fusion not in ("add", "concat_project"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.spatial_kernel % 2 == 0:
            raise ConfigError("sedam.spatial_kernel must be odd")
        if self.reduction < 1:
            raise ConfigError("sedam.reduction must be >= 1")


@dataclass
class HeadConfig:
    num_classes: int = 80
    tower_depth: int = 4
    prior_prob: float = 0.01

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("head.num_classes must be >= 1")
        if self.tower_depth < 0:
            raise ConfigError("head.tower_depth must be >= 0")
        if not 0.0 < self.prior_prob < 1.0:
            raise ConfigError("head.prior_prob must be in (0, 1)")


@dataclass
class LossConfig:
    alpha: float = 0.25
    gamma_focal: float = 2.0
    gamma_balance: float = 1.0
    beta_balance: float = 1.0
    iou_mode: str = "iou"
    revised_regression: bool = True

    def validate(self) -> None:
        if self.iou_mode not in ("iou", "giou"):
            raise ConfigError(f"unknown loss.iou_mode {self.iou_mode!r}")


@dataclass
class AssignConfig:
    ranges: list = field(default_factory=lambda: [list(r) for r in DEFAULT_RANGES])
    semantic_start_fraction: float = 0.5

    def validate(self) -> None:
        if len(self.ranges) != 4:
            raise ConfigError("assign.ranges needs one (min, max) pair per level (4 levels)")
        prev_hi = 0.0
        for i, (lo, hi) in enumerate(self.ranges):
            hi = math.inf if hi is None else float(hi)
            if float(lo) != prev_hi:
                raise ConfigError(f"assign.ranges must be contiguous from 0; level {i} starts at {lo}")
            if hi <= float(lo):
                raise ConfigError(f"assign.ranges level {i} is empty")
            prev_hi = hi
        if prev_hi != math.inf:
            raise ConfigError("assign.ranges must extend to infinity")
        if not 0.0 <= self.semantic_start_fraction:
            raise ConfigError("assign.semantic_start_fraction must be >= 0")

    def scaled_ranges(self, input_size: int) -> list[tuple[float, float]]:
        """Level ranges rescaled from the 800 px reference to ``input_size``."""
        k = input_size / REFERENCE_INPUT_SIZE
        return [(float(lo) * k, math.inf if hi is None else float(hi) * k) for lo, hi in self.ranges]


@dataclass
class PostprocessConfig:
    score_threshold: float = 0.05
    nms_iou: float = 0.6
    max_detections_per_image: int = 100
    pre_nms_top_k: int = 1000
    revise: bool = True

    def validate(self) -> None:
        for name in ("score_threshold", "nms_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"postprocess.{name} must be in [0, 1], got {v}")


@dataclass
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 0.0005
    momentum: float = 0.9
    iterations: int = 1000
    batch_size: int = 8
    seed: int = 0
    input_size: int = 800
    use_sedam: bool = True
    checkpoint_every: int = 0
    log_every: int = 1
    deterministic: bool = True
    dtype: str = "float32"

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.input_size % 32:
            raise ConfigError(f"input_size must be divisible by 32, got {self.input_size}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sedam: SedamConfig = field(default_factory=SedamConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    assign: AssignConfig = field(default_factory=AssignConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)

    def validate(self) -> "ExperimentConfig":
        for f in fields(self):
            getattr(self, f.name).validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        cfg = cls()
        for key, value in flatten(data or {}).items():
            set_key(cfg, key, value)
        return cfg

    def replace(self, **overrides: Any) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"sedam.width": 64})``."""
        cfg = ExperimentConfig.from_dict(self.to_dict())
        for key, value in overrides.items():
            set_key(cfg, key, value)
        return cfg


_SECTIONS = {f.name for f in fields(ExperimentConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def flatten(data: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and (prefix or k in _SECTIONS):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _resolve(key: str) -> tuple[str, str]:
    if key == "attention":
        return "sedam", "attention"
    if "." not in key:
        if key in _TRAIN_KEYS:
            return "train", key
        raise ConfigError(f"unknown config key {key!r}")
    section, name = key.split(".", 1)
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    return section, name


def set_key(cfg: ExperimentConfig, key: str, value: Any) -> None:
    section, name = _resolve(key)
    target = getattr(cfg, section)
    known = {f.name: f for f in fields(target)}
    if name not in known:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(target, name)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
    elif isinstance(current, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
    elif isinstance(current, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        value = float(value)
    setattr(target, name, value)


def parse_override(text: str) -> tuple[str, Any]:
    """Parse one ``key=value`` override; the value is read as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path: str | os.PathLike | None = None, overrides: list[str] = ()) -> ExperimentConfig:
    """Load a YAML config file, apply ``key=value`` overrides, validate.

    When no seed is given in the file or the overrides, ``PSRP_SEED`` is used.
    """
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
    cfg = ExperimentConfig.from_dict(data)
    pairs = [parse_override(o) for o in overrides]
    seed_given = "seed" in flatten(data) or "train.seed" in flatten(data) or any(
        k in ("seed", "train.seed") for k, _ in pairs
    )
    if not seed_given and os.environ.get("PSRP_SEED"):
        try:
            cfg.train.seed = int(os.environ["PSRP_SEED"])
        except ValueError as exc:
            raise ConfigError(f"PSRP_SEED must be an integer, got {os.environ['PSRP_SEED']!r}") from exc
    for key, value in pairs:
        set_key(cfg, key, value)
    return cfg.validate()


def save_config(cfg: ExperimentConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
