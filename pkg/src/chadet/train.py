"""Adam, learning-rate schedules, the training loop, and evaluation helpers."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .losses import LossWeights, total_loss, warp_image
from .metrics import MetricsReport, compute_metrics
from .net import (ChadetParams, DepthRange, StageConfig, chadet_forward, init_params, min_pool_pyramid,
                  sparse_to_dense)
from .synth import Sample
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.99
ADAM_EPS = 1e-8


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class LrSchedule:
    """Piecewise-constant learning rate over inclusive, zero-indexed epoch ranges."""

    ranges: list  # [(first_epoch, last_epoch, lr), ...]

    def __post_init__(self):
        self.ranges = [(int(a), int(b), float(lr)) for a, b, lr in self.ranges]
        if not self.ranges or self.ranges[0][0] != 0:
            raise ValueError("schedule must start at epoch 0")
        for (a, b, _), (c, _, _) in zip(self.ranges, self.ranges[1:]):
            if c != b + 1:
                raise ValueError(f"schedule ranges not contiguous at epoch {b} -> {c}")
        for a, b, lr in self.ranges:
            if b < a or lr < 0:
                raise ValueError(f"bad schedule range ({a}, {b}, {lr})")

    @property
    def total_epochs(self) -> int:
        return self.ranges[-1][1] + 1

    def lr_at(self, epoch: int) -> float:
        for a, b, lr in self.ranges:
            if a <= epoch <= b:
                return lr
        raise ValueError(f"epoch {epoch} outside schedule [0, {self.total_epochs - 1}]")

    @classmethod
    def constant(cls, lr: float, epochs: int) -> "LrSchedule":
        return cls([(0, epochs - 1, lr)])

    @classmethod
    def preset(cls, name: str) -> "LrSchedule":
        try:
            return cls(list(SCHEDULE_PRESETS[name]))
        except KeyError:
            raise ValueError(f"unknown schedule preset {name!r}; choose from {sorted(SCHEDULE_PRESETS)}") from None


SCHEDULE_PRESETS = {
    "outdoor": [(0, 2, 5e-5), (3, 8, 1e-4), (9, 20, 1.5e-4), (21, 30, 1e-4), (31, 45, 5e-5), (46, 60, 2e-5)],
    "indoor": [(0, 20, 1e-4), (21, 35, 1.5e-4)],
    # same rise-and-decay shape as the outdoor table, compressed to 10 short synthetic epochs
    "desk": [(0, 0, 1e-3), (1, 5, 2e-3), (6, 7, 1e-3), (8, 9, 5e-4)],
}


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls({k: np.zeros_like(params[k].data) for k in params},
                   {k: np.zeros_like(params[k].data) for k in params}, 0)


def adam_step(params, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place, in sorted parameter order.

    Raises :class:`NonFiniteGradientError` before touching anything if a
    gradient contains inf/nan.
    """
    names = sorted(params.keys() if hasattr(params, "keys") else params)
    for name in names:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name}; step aborted")
        if g is not None and g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    state.t += 1
    t = state.t
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name in names:
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = g.astype(p.data.dtype, copy=False)
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.data.dtype)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * np.float32(scale)
    return total


@dataclass
class TrainConfig:
    stage: StageConfig = field(default_factory=StageConfig)
    depth_range: DepthRange = field(default_factory=DepthRange)
    weights: LossWeights = field(default_factory=LossWeights.outdoor)
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule.preset("desk"))
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    clip_norm: float = 10.0
    max_steps: int | None = None
    center_crop: tuple | None = None   # (width, height)

    def __post_init__(self):
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("batch_size and epochs must be positive")
        if self.schedule.total_epochs < self.epochs:
            raise ValueError(f"schedule covers {self.schedule.total_epochs} epochs, training runs {self.epochs}")


@dataclass
class Batch:
    rgb: np.ndarray        # (B, 3, H, W)
    rgb_next: np.ndarray
    sparse: np.ndarray     # (B, 1, H, W)
    gt: np.ndarray
    poses: list
    intrinsics: list


def center_crop(sample: Sample, size) -> Sample:
    w, h = size
    H, W = sample.gt_depth.shape
    if w > W or h > H:
        raise ValueError(f"crop {w}x{h} larger than image {W}x{H}")
    top, left = (H - h) // 2, (W - w) // 2
    sl = (slice(top, top + h), slice(left, left + w))
    K = sample.intrinsics
    from .geometry import Intrinsics
    return Sample(sample.rgb_t[sl], sample.rgb_t1[sl], sample.sparse[sl], sample.gt_depth[sl],
                  sample.pose_t_to_t1, Intrinsics(K.fx, K.fy, K.cx - left, K.cy - top))


def make_batch(samples: Sequence[Sample]) -> Batch:
    return Batch(
        np.stack([s.rgb_t.transpose(2, 0, 1) for s in samples]).astype(np.float32),
        np.stack([s.rgb_t1.transpose(2, 0, 1) for s in samples]).astype(np.float32),
        np.stack([s.sparse[None] for s in samples]).astype(np.float32),
        np.stack([s.gt_depth[None] for s in samples]).astype(np.float32),
        [s.pose_t_to_t1 for s in samples],
        [s.intrinsics for s in samples],
    )


def loss_on_batch(params: ChadetParams, batch: Batch, cfg: TrainConfig):
    depth = chadet_forward(Tensor(batch.rgb), Tensor(batch.sparse), params, cfg.stage, cfg.depth_range,
                           batch.intrinsics)
    rec, mask = warp_image(Tensor(batch.rgb_next), depth, batch.poses, batch.intrinsics)
    return total_loss(batch.rgb, batch.sparse, depth, rec, mask, cfg.weights)


def format_log_line(step: int, epoch: int, lr: float, parts: dict) -> str:
    return (f"step={step} epoch={epoch} lr={lr:.6g} total={parts['total']:.6f} "
            f"lp={parts['lp']:.6f} ld={parts['ld']:.6f} ls={parts['ls']:.6f}")


@dataclass
class TrainResult:
    params: ChadetParams
    state: AdamState
    history: list
    steps: int


def _rng_payload(rng: np.random.Generator, epoch: int, step: int) -> dict:
    return {"bit_generator": rng.bit_generator.state, "next_epoch": epoch, "step": step}


def _write_checkpoint(path, params, state, rng, next_epoch, step):
    tensors = {k: params[k].data for k in params}
    ckpt_io.save_checkpoint(path, tensors, (state.t, state.m, state.v), _rng_payload(rng, next_epoch, step))


def params_from_checkpoint(ck: ckpt_io.Checkpoint, stage: StageConfig) -> ChadetParams:
    """Rebuild parameters, checking every shape against ``stage``."""
    expected = init_params(stage, seed=0)
    problems = []
    for name in expected:
        if name not in ck.tensors:
            problems.append(f"{name}: missing from checkpoint (config expects {expected[name].shape})")
        elif ck.tensors[name].shape != expected[name].shape:
            problems.append(f"{name}: checkpoint {ck.tensors[name].shape} vs config {expected[name].shape}")
    extra = sorted(set(ck.tensors) - set(expected))
    problems += [f"{name}: not used by this config" for name in extra]
    if problems:
        raise ckpt_io.CheckpointError("checkpoint incompatible with stage config:\n  " + "\n  ".join(problems[:8]))
    for name in expected:
        expected[name].data = ck.tensors[name].astype(np.float32).copy()
    return expected


def train(cfg: TrainConfig, dataset: Sequence[Sample], checkpoint_path=None,
          log_fn: Callable[[str], None] | None = None, resume_from=None,
          params: ChadetParams | None = None) -> TrainResult:
    """Run the unsupervised training loop.

    Shuffles with a seeded generator every epoch, writes one log line per
    step and a checkpoint (with Adam and RNG state) after every epoch.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if cfg.center_crop:
        dataset = [center_crop(s, cfg.center_crop) for s in dataset]
    rng = np.random.default_rng(cfg.seed)
    start_epoch, step = 0, 0
    if resume_from is not None:
        ck = ckpt_io.load_checkpoint(resume_from)
        params = params_from_checkpoint(ck, cfg.stage)
        state = AdamState({k: ck.adam_m[k].copy() for k in params}, {k: ck.adam_v[k].copy() for k in params},
                          ck.adam_step)
        rng.bit_generator.state = ck.rng["bit_generator"]
        start_epoch, step = ck.rng["next_epoch"], ck.rng["step"]
    else:
        params = params or init_params(cfg.stage, seed=cfg.seed)
        state = AdamState.zeros_like(params)
    history = []
    n = len(dataset)
    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.schedule.lr_at(epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            batch = make_batch([dataset[i] for i in order[start : start + cfg.batch_size]])
            params.zero_grad()
            with Tape() as tape:
                parts = loss_on_batch(params, batch, cfg)
                total = parts.total
                if not np.isfinite(total.data).all():
                    raise TrainingError(f"non-finite loss at step {step}; last checkpoint kept")
                tape.backward(total)
            grads = {k: params[k].grad for k in params if params[k].grad is not None}
            clip_grad_norm(grads, cfg.clip_norm)
            adam_step(params, grads, state, lr)
            record = {"step": step, "epoch": epoch, "lr": lr, **parts.as_dict()}
            history.append(record)
            if log_fn is not None:
                log_fn(format_log_line(step, epoch, lr, record))
            step += 1
        if checkpoint_path is not None:
            _write_checkpoint(checkpoint_path, params, state, rng, epoch + 1, step)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return TrainResult(params, state, history, step)


# -- evaluation -----------------------------------------------------------------

def predict(params: ChadetParams, samples: Sequence[Sample], cfg: TrainConfig, batch_size: int = 8) -> np.ndarray:
    out = []
    for i in range(0, len(samples), batch_size):
        b = make_batch(samples[i : i + batch_size])
        d = chadet_forward(Tensor(b.rgb), Tensor(b.sparse), params, cfg.stage, cfg.depth_range, b.intrinsics)
        out.append(d.data[:, 0])
    return np.concatenate(out)


def quasi_dense_fill(sparse: np.ndarray) -> np.ndarray:
    """Non-learned densification: smallest min-pooling scale that covers each pixel.

    Pixels no scale covers fall back to the mean of the valid sparse depth.
    """
    sp = np.asarray(sparse, dtype=np.float32)
    if sp.ndim == 2:
        sp = sp[None, None]
    pyr = min_pool_pyramid(sp)
    out = np.zeros(sp.shape, dtype=np.float32)
    for k in reversed(range(pyr.shape[1])):
        level = pyr[:, k : k + 1]
        out = np.where(level > 0, level, out)
    for b in range(out.shape[0]):
        valid = sp[b] > 0
        fallback = sp[b][valid].mean() if valid.any() else 1.0
        out[b] = np.where(out[b] > 0, out[b], fallback)
    return out[:, 0]


def learned_quasi_dense(params: ChadetParams, samples: Sequence[Sample]) -> np.ndarray:
    """The network's sparse-to-dense stage on its own, in meters."""
    sp = np.stack([s.sparse[None] for s in samples]).astype(np.float32)
    return sparse_to_dense(Tensor(sp), params).data[:, 0]


@dataclass
class EvalResult:
    model: MetricsReport
    quasi_dense: MetricsReport      # the model's own sparse-to-dense output, read as depth
    constant_mean: MetricsReport    # per-image mean ground-truth depth everywhere
    pooled_fill: MetricsReport      # non-learned nearest-scale min-pool fill


def evaluate(params: ChadetParams, samples: Sequence[Sample], cfg: TrainConfig) -> EvalResult:
    """Metrics for the network and three reference predictors on the same pixels."""
    gt = np.stack([s.gt_depth for s in samples])
    mask = gt > 0
    pred = predict(params, samples, cfg)
    qd = learned_quasi_dense(params, samples)
    const = np.stack([np.full_like(s.gt_depth, s.gt_depth.mean()) for s in samples])
    fill = quasi_dense_fill(np.stack([s.sparse[None] for s in samples]))
    return EvalResult(compute_metrics(pred, gt, mask), compute_metrics(qd, gt, mask),
                      compute_metrics(const, gt, mask), compute_metrics(fill, gt, mask))


def save_params(path, params: ChadetParams) -> None:
    ckpt_io.save_checkpoint(path, {k: params[k].data for k in params})


def load_params(path, stage: StageConfig) -> ChadetParams:
    return params_from_checkpoint(ckpt_io.load_checkpoint(Path(path)), stage)
