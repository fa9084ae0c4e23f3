"""Pinhole camera model, rigid poses, and pixel-grid helpers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, matmul, mul, reshape


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    @classmethod
    def default_for(cls, height: int, width: int) -> "Intrinsics":
        # ~60 degree horizontal field of view, principal point at the image center
        f = width / (2 * np.tan(np.pi / 6))
        return cls(f, f, (width - 1) / 2, (height - 1) / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])


@dataclass(frozen=True)
class Pose:
    """Rigid transform taking points in the source camera frame to the target frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) <= 0:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def as_matrix(self) -> np.ndarray:
        """3x4 [R | t], row-major."""
        return np.hstack([self.rotation, self.translation[:, None]])

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def _stack_intrinsics(intrinsics, batch: int) -> np.ndarray:
    if isinstance(intrinsics, Intrinsics):
        return np.tile(intrinsics.as_array(), (batch, 1))
    arr = np.asarray([k.as_array() if isinstance(k, Intrinsics) else k for k in intrinsics], dtype=np.float64)
    return arr.reshape(batch, 4)


def pixel_rays(intrinsics, batch: int, height: int, width: int) -> np.ndarray:
    """(B, 3, H, W) camera-frame rays with unit z: ((u-cx)/fx, (v-cy)/fy, 1)."""
    K = _stack_intrinsics(intrinsics, batch)
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    rays = np.empty((batch, 3, height, width))
    rays[:, 0] = (u[None] - K[:, 2, None, None]) / K[:, 0, None, None]
    rays[:, 1] = (v[None] - K[:, 3, None, None]) / K[:, 1, None, None]
    rays[:, 2] = 1.0
    return rays


def backproject(depth: Tensor, intrinsics) -> Tensor:
    """Camera-frame points (B, 3, H, W) from a (B, 1, H, W) depth map."""
    B, _, H, W = depth.shape
    rays = pixel_rays(intrinsics, B, H, W).astype(depth.dtype)
    return mul(depth, Tensor(rays, dtype=depth.dtype))


def transform_points(points: Tensor, poses) -> Tensor:
    """Apply per-sample rigid transforms to (B, 3, H, W) points."""
    B, _, H, W = points.shape
    if isinstance(poses, Pose):
        poses = [poses] * B
    R = np.stack([p.rotation for p in poses]).astype(points.dtype)
    t = np.stack([p.translation for p in poses]).astype(points.dtype)
    flat = reshape(points, (B, 3, H * W))
    moved = add(matmul(Tensor(R, dtype=points.dtype), flat), Tensor(t[:, :, None], dtype=points.dtype))
    return reshape(moved, (B, 3, H, W))


def intrinsics_array(intrinsics, batch: int) -> np.ndarray:
    return _stack_intrinsics(intrinsics, batch)
