"""Flat ``key = value`` experiment configuration.

Example::

    # stage layout
    channels = [16, 32, 64, 128]
    windows  = [2, 2, 4, 4]
    heads    = 4
    schedule = desk        # desk | outdoor | indoor
    lr       = 5e-4        # optional: constant rate instead of a preset

Every key is optional; an empty file yields the defaults below.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .losses import LossWeights
from .net import DepthRange, StageConfig
from .synth import SynthConfig
from .train import LrSchedule, SCHEDULE_PRESETS, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    """All knobs for data generation, training and evaluation.

    Defaults: four stages of [16, 32, 64, 128] channels with windows
    [2, 2, 4, 4] and 4 heads; depth range 0.5 to 20 m; outdoor loss weights;
    the ``desk`` LR preset over 10 epochs at batch 4; 64x64 images with 1500
    sparse points.
    """

    channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    windows: list = field(default_factory=lambda: [2, 2, 4, 4])
    heads: list = field(default_factory=lambda: [4, 4, 4, 4])
    se_reduction: int = 4
    s2d_hidden: int = 8
    min_d: float = 0.5
    max_d: float = 20.0
    weights: str = "outdoor"            # outdoor | indoor; per-term keys below override
    w_p: float | None = None
    w_d: float | None = None
    w_s: float | None = None
    w_1: float | None = None
    w_2: float | None = None
    schedule: str = "desk"
    lr: float | None = None             # constant rate; overrides ``schedule``
    batch_size: int = 4
    epochs: int = 10
    max_steps: int | None = None
    seed: int = 0
    clip_norm: float = 10.0
    data_root: str | None = None
    n_points: int = 1500
    height: int = 64
    width: int = 64

    def stage_config(self) -> StageConfig:
        heads = self.heads if isinstance(self.heads, list) else [self.heads] * len(self.channels)
        return StageConfig(list(self.channels), list(self.windows), heads, self.se_reduction, self.s2d_hidden)

    def loss_weights(self) -> LossWeights:
        if self.weights not in ("outdoor", "indoor"):
            raise ConfigError(f"weights must be 'outdoor' or 'indoor', got {self.weights!r}")
        base = getattr(LossWeights, self.weights)()
        overrides = {k: float(getattr(self, k)) for k in ("w_p", "w_d", "w_s", "w_1", "w_2")
                     if getattr(self, k) is not None}
        return replace(base, **overrides)

    def lr_schedule(self) -> LrSchedule:
        if self.lr is not None:
            return LrSchedule.constant(self.lr, self.epochs)
        return LrSchedule.preset(self.schedule)

    def train_config(self) -> TrainConfig:
        return TrainConfig(stage=self.stage_config(), depth_range=DepthRange(self.min_d, self.max_d),
                           weights=self.loss_weights(), schedule=self.lr_schedule(),
                           batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
                           clip_norm=self.clip_norm, max_steps=self.max_steps)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(height=self.height, width=self.width, n_points=self.n_points,
                           min_d=self.min_d, max_d=self.max_d)

    def validate(self) -> None:
        """Build every derived object once so inconsistencies surface before any work."""
        try:
            stage = self.stage_config()
            stage.check_input_size(self.height, self.width)
            self.train_config()
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.n_points <= 0:
            raise ConfigError("n_points must be positive")


_FIELDS = {f.name: f for f in fields(Config)}
_INT_KEYS = {"se_reduction", "s2d_hidden", "batch_size", "epochs", "max_steps", "seed", "n_points", "height", "width"}
_FLOAT_KEYS = {"min_d", "max_d", "w_p", "w_d", "w_s", "w_1", "w_2", "lr", "clip_norm"}
_LIST_KEYS = {"channels", "windows", "heads"}


def _scalar(text: str, kind, key: str, lineno: int):
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {kind.__name__}, got {text!r}") from None


def _int(text: str) -> int:
    v = float(text)
    if not v.is_integer():
        raise ValueError(text)
    return int(v)


_int.__name__ = "int"


def _parse_value(key: str, raw: str, lineno: int):
    if raw.lower() == "none" and _FIELDS[key].default is None:
        return None
    if key in _LIST_KEYS:
        if raw.startswith("["):
            if not raw.endswith("]"):
                raise ConfigError(f"line {lineno}: unterminated list for {key}")
            items = [s.strip() for s in raw[1:-1].split(",") if s.strip()]
            if not items:
                raise ConfigError(f"line {lineno}: {key} list is empty")
            return [_scalar(s, _int, key, lineno) for s in items]
        if key == "heads":
            return _scalar(raw, _int, key, lineno)
        raise ConfigError(f"line {lineno}: {key} expects a bracketed list, got {raw!r}")
    if key in _INT_KEYS:
        return _scalar(raw, _int, key, lineno)
    if key in _FLOAT_KEYS:
        return _scalar(raw, float, key, lineno)
    return raw.strip("\"'")


def parse_config(text: str) -> Config:
    """Parse config text; errors name the offending line."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if not raw:
            raise ConfigError(f"line {lineno}: missing value for {key}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, lineno)
    cfg = Config(**values)
    if isinstance(cfg.heads, int):
        cfg.heads = [cfg.heads] * len(cfg.channels)
    if cfg.schedule not in SCHEDULE_PRESETS:
        raise ConfigError(f"unknown schedule {cfg.schedule!r}; choose from {sorted(SCHEDULE_PRESETS)}")
    cfg.validate()
    return cfg


def load_config(path) -> Config:
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as e:
        raise ConfigError(f"{path}: not UTF-8 ({e})") from None
    return parse_config(text)
