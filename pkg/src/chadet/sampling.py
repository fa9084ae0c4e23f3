"""Differentiable bilinear resampling at continuous pixel coordinates."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, custom, note_branch

# coordinates this close outside the image are rounding noise from reprojection
EDGE_TOL = 1e-3


def bilinear_sample(x: Tensor, grid: Tensor) -> tuple[Tensor, np.ndarray]:
    """Sample ``x`` (B, C, H, W) at ``grid`` (B, 2, h, w) pixel coordinates.

    Channel 0 of the grid is the column (x), channel 1 the row (y); integer
    coordinates hit pixel centers. A location is valid when it lies inside
    [0, W-1] x [0, H-1] (up to ``EDGE_TOL``), i.e. all four neighbours exist. Invalid locations
    produce 0 and no gradient. Returns the samples and a (B, 1, h, w) float
    mask.
    """
    if x.ndim != 4 or grid.ndim != 4 or grid.shape[1] != 2 or grid.shape[0] != x.shape[0]:
        raise ShapeError(f"bilinear_sample: input {x.shape} / grid {grid.shape} incompatible")
    B, C, H, W = x.shape
    _, _, h, w = grid.shape
    gx = grid.data[:, 0]
    gy = grid.data[:, 1]
    valid = (np.isfinite(gx) & np.isfinite(gy) & (gx >= -EDGE_TOL) & (gx <= W - 1 + EDGE_TOL)
             & (gy >= -EDGE_TOL) & (gy <= H - 1 + EDGE_TOL))
    sx = np.clip(np.where(valid, gx, 0), 0, W - 1)
    sy = np.clip(np.where(valid, gy, 0), 0, H - 1)
    x0 = np.clip(np.floor(sx), 0, max(W - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(sy), 0, max(H - 2, 0)).astype(np.int64)
    note_branch(valid, x0, y0, (gx < 0) | (gx > W - 1), (gy < 0) | (gy > H - 1))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (sx - x0).astype(x.dtype)
    wy = (sy - y0).astype(x.dtype)
    vf = valid.astype(x.dtype)

    flat = x.data.reshape(B, C, H * W)
    idx = [(yy * W + xx).reshape(B, 1, h * w) for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))]

    def gather(i):
        return np.take_along_axis(flat, np.broadcast_to(i, (B, C, h * w)), axis=2).reshape(B, C, h, w)

    v00, v01, v10, v11 = (gather(i) for i in idx)
    w00 = ((1 - wx) * (1 - wy) * vf)[:, None]
    w01 = (wx * (1 - wy) * vf)[:, None]
    w10 = ((1 - wx) * wy * vf)[:, None]
    w11 = (wx * wy * vf)[:, None]
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def bw(g):
        g_in = None
        if x.requires_grad:
            base = (np.arange(B * C).reshape(B, C, 1) * (H * W))
            g_flat = np.zeros(B * C * H * W, dtype=np.float64)
            for i, wt in zip(idx, (w00, w01, w10, w11)):
                pos = (base + i).ravel()
                g_flat += np.bincount(pos, weights=(g * wt).reshape(B, C, h * w).ravel(), minlength=g_flat.size)
            g_in = g_flat.reshape(x.shape).astype(x.dtype)
        g_grid = None
        if grid.requires_grad:
            wxe, wye, vfe = wx[:, None], wy[:, None], vf[:, None]
            dx = ((1 - wye) * (v01 - v00) + wye * (v11 - v10)) * vfe
            dy = ((1 - wxe) * (v10 - v00) + wxe * (v11 - v01)) * vfe
            g_grid = np.stack([(g * dx).sum(axis=1), (g * dy).sum(axis=1)], axis=1)
        return g_in, g_grid

    return custom(out, (x, grid), bw, "bilinear_sample"), vf[:, None]
