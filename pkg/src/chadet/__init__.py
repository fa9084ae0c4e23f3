"""Depth completion from RGB and sparse depth with cross-hierarchical attention."""
from .config import Config, ConfigError, load_config, parse_config
from .geometry import Intrinsics, Pose
from .losses import LossWeights, total_loss, warp_image
from .metrics import MetricsReport, compute_metrics
from .net import ChadetParams, DepthRange, StageConfig, chadet_forward, init_params, param_count
from .synth import Sample, SynthConfig, make_sample
from .tensor import Tape, Tensor, precision
from .train import LrSchedule, TrainConfig, evaluate, predict, train

__all__ = [
    "ChadetParams", "Config", "ConfigError", "DepthRange", "Intrinsics", "LossWeights", "LrSchedule",
    "MetricsReport", "Pose", "Sample", "StageConfig", "SynthConfig", "Tape", "Tensor", "TrainConfig",
    "chadet_forward", "compute_metrics", "evaluate", "init_params", "load_config", "make_sample",
    "param_count", "parse_config", "precision", "predict", "total_loss", "train", "warp_image",
]
