"""Unsupervised objective: photometric reconstruction, sparse depth, edge-aware smoothness."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .conv import depthwise_conv2d
from .geometry import backproject, intrinsics_array, transform_points
from .sampling import bilinear_sample
from .tensor import ShapeError, Tensor

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
MIN_PROJ_DEPTH = 1e-3


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_p: float = 1.0
    w_d: float = 0.60
    w_s: float = 0.06
    w_1: float = 0.15
    w_2: float = 0.95

    def __post_init__(self):
        for name in ("w_p", "w_d", "w_s", "w_1", "w_2"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")

    @classmethod
    def outdoor(cls) -> "LossWeights":
        return cls(w_p=1.0, w_d=0.60, w_s=0.06, w_1=0.15, w_2=0.95)

    @classmethod
    def indoor(cls) -> "LossWeights":
        return cls(w_p=1.0, w_d=1.0, w_s=0.6, w_1=0.15, w_2=0.95)


def warp_image(src: Tensor, depth: Tensor, pose, intrinsics) -> tuple[Tensor, np.ndarray]:
    """Reconstruct the target view by sampling ``src`` where target pixels land.

    ``depth`` is the target view's depth, ``pose`` maps target-camera points
    into the source camera. The mask is 0 for pixels that project behind the
    source camera or outside its image.
    """
    B, _, H, W = depth.shape
    pts = transform_points(backproject(depth, intrinsics), pose)
    K = intrinsics_array(intrinsics, B).astype(depth.dtype)
    z = pts[:, 2:3]
    front = (z.data > MIN_PROJ_DEPTH).astype(depth.dtype)
    # keep the division finite where the point is behind the camera; those pixels are masked
    z_safe = z * Tensor(front, dtype=depth.dtype) + Tensor(1.0 - front, dtype=depth.dtype)
    fx, fy, cx, cy = (K[:, i, None, None, None] for i in range(4))
    u = T.div(pts[:, 0:1] * Tensor(fx, dtype=depth.dtype), z_safe) + Tensor(cx, dtype=depth.dtype)
    v = T.div(pts[:, 1:2] * Tensor(fy, dtype=depth.dtype), z_safe) + Tensor(cy, dtype=depth.dtype)
    grid = T.concat([u, v], axis=1)
    out, mask = bilinear_sample(T.as_tensor(src), grid)
    mask = mask * front
    return out, mask


def _box3(x: Tensor) -> Tensor:
    C = x.shape[1]
    w = Tensor(np.full((C, 1, 3, 3), 1.0 / 9.0), dtype=x.dtype)
    padded = T.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
    return depthwise_conv2d(padded, w)


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel SSIM from 3x3 (reflect-padded) local statistics."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    mu_a, mu_b = _box3(a), _box3(b)
    mu_ab = mu_a * mu_b
    mu_a2, mu_b2 = mu_a * mu_a, mu_b * mu_b
    var_a = _box3(a * a) - mu_a2
    var_b = _box3(b * b) - mu_b2
    cov = _box3(a * b) - mu_ab
    num = T.add_scalar(T.mul_scalar(mu_ab, 2.0), SSIM_C1) * T.add_scalar(T.mul_scalar(cov, 2.0), SSIM_C2)
    den = T.add_scalar(mu_a2 + mu_b2, SSIM_C1) * T.add_scalar(var_a + var_b, SSIM_C2)
    return num / den


def _as_mask(mask, like: Tensor) -> np.ndarray:
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=like.dtype)
    return np.broadcast_to(m, (like.shape[0], 1) + like.shape[2:])


def photometric_loss(target: Tensor, reconstruction: Tensor, mask, weights: LossWeights) -> Tensor:
    """w_1 * masked mean |target - rec| + w_2 * masked mean (1 - SSIM) / 2."""
    target, reconstruction = T.as_tensor(target), T.as_tensor(reconstruction)
    if target.shape != reconstruction.shape:
        raise ShapeError(f"photometric_loss: shapes differ {target.shape} vs {reconstruction.shape}")
    m = _as_mask(mask, target)
    n_valid = float(m.sum())
    if n_valid == 0:
        raise EmptyMaskError("photometric_loss: mask has no valid pixels")
    C = target.shape[1]
    # masked-out pixels are replaced by the target itself so their values cannot leak in,
    # not even through the SSIM window
    mt = Tensor(m, dtype=target.dtype)
    rec = reconstruction * mt + target * Tensor(1.0 - m, dtype=target.dtype)
    l1 = T.sum_(T.abs_(target - rec) * mt) * (1.0 / (n_valid * C))
    loss = l1 * weights.w_1
    if weights.w_2:
        dssim = T.mul_scalar(T.add_scalar(T.neg(ssim(target, rec)), 1.0), 0.5)
        loss = loss + T.sum_(dssim * mt) * (weights.w_2 / (n_valid * C))
    return loss


def sparse_depth_loss(pred: Tensor, sparse) -> Tensor:
    """Mean absolute error over pixels carrying a sparse measurement."""
    pred = T.as_tensor(pred)
    z0 = np.asarray(sparse.data if isinstance(sparse, Tensor) else sparse)
    if z0.shape != pred.shape:
        raise ShapeError(f"sparse_depth_loss: shapes differ {pred.shape} vs {z0.shape}")
    if (z0 < 0).any():
        raise ValueError("sparse depth must be non-negative")
    valid = (z0 > 0).astype(pred.dtype)
    n = float(valid.sum())
    if n == 0:
        raise EmptyMaskError("sparse_depth_loss: no valid sparse measurements")
    diff = T.abs_(pred - Tensor(z0, dtype=pred.dtype)) * Tensor(valid, dtype=pred.dtype)
    return T.sum_(diff) * (1.0 / n)


def smoothness_loss(depth: Tensor, image) -> Tensor:
    """Edge-aware first-order smoothness with forward differences.

    Each directional term is averaged over the pixels where its difference
    exists; the image gradient magnitude is averaged over colour channels.
    """
    depth = T.as_tensor(depth)
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=depth.dtype)
    if img.shape[0] != depth.shape[0] or img.shape[2:] != depth.shape[2:]:
        raise ShapeError(f"smoothness_loss: image {img.shape} and depth {depth.shape} differ spatially")
    wx = np.exp(-np.abs(img[:, :, :, 1:] - img[:, :, :, :-1]).mean(axis=1, keepdims=True))
    wy = np.exp(-np.abs(img[:, :, 1:, :] - img[:, :, :-1, :]).mean(axis=1, keepdims=True))
    dx = T.abs_(depth[:, :, :, 1:] - depth[:, :, :, :-1])
    dy = T.abs_(depth[:, :, 1:, :] - depth[:, :, :-1, :])
    return T.mean(dx * Tensor(wx, dtype=depth.dtype)) + T.mean(dy * Tensor(wy, dtype=depth.dtype))


@dataclass
class LossBreakdown:
    total: Tensor
    lp: float
    ld: float
    ls: float

    def as_dict(self) -> dict:
        return {"total": float(self.total.item()), "lp": self.lp, "ld": self.ld, "ls": self.ls}


def total_loss(target_rgb, sparse, pred_depth: Tensor, reconstruction: Tensor, mask,
               weights: LossWeights) -> LossBreakdown:
    """w_p * l_p + w_d * l_d + w_s * l_s; the breakdown holds the weighted terms."""
    total = None
    parts = {}
    terms = (
        ("lp", weights.w_p, lambda: photometric_loss(target_rgb, reconstruction, mask, weights)),
        ("ld", weights.w_d, lambda: sparse_depth_loss(pred_depth, sparse)),
        ("ls", weights.w_s, lambda: smoothness_loss(pred_depth, target_rgb)),
    )
    for key, w, fn in terms:
        if w == 0:
            parts[key] = 0.0
            continue
        term = T.mul_scalar(fn(), w)
        parts[key] = float(term.item())
        total = term if total is None else total + term
    if total is None:
        total = Tensor(np.zeros(()), dtype=pred_depth.dtype)
    return LossBreakdown(total, parts["lp"], parts["ld"], parts["ls"])
