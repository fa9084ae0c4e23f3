"""Direct (im2col / shifted-slice) convolution kernels with analytic adjoints."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, custom


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _check_geometry(x_shape, kh, kw, stride, padding, op):
    if stride < 1:
        raise ValueError(f"{op}: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"{op}: padding must be non-negative, got {padding}")
    H, W = x_shape[2], x_shape[3]
    if H + 2 * padding < kh:
        raise ShapeError(f"{op}: padded height {H + 2 * padding} smaller than kernel height {kh}")
    if W + 2 * padding < kw:
        raise ShapeError(f"{op}: padded width {W + 2 * padding} smaller than kernel width {kw}")


def _pad_hw(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Ho, Wo, kh, kw) strided view of a padded input."""
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _col2im(cols: np.ndarray, padded_shape, stride: int) -> np.ndarray:
    """Adjoint of ``_windows``: scatter-add (B, C, Ho, Wo, kh, kw) back to the padded map."""
    B, C, ho, wo, kh, kw = cols.shape
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += cols[..., i, j]
    return out


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    O, C, kh, kw = w.shape
    ho = _out_extent(x.shape[2], kh, stride, padding)
    wo = _out_extent(x.shape[3], kw, stride, padding)
    if kh == kw == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride]
        return np.einsum("bchw,oc->bohw", xs, w[:, :, 0, 0], optimize=True)
    cols = _windows(_pad_hw(x, padding), kh, kw, stride, ho, wo)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_grad_input(g: np.ndarray, w: np.ndarray, x_shape, stride: int, padding: int) -> np.ndarray:
    O, C, kh, kw = w.shape
    B, _, H, W = x_shape
    if kh == kw == 1 and padding == 0:
        gx = np.zeros(x_shape, dtype=g.dtype)
        gx[:, :, ::stride, ::stride] = np.einsum("bohw,oc->bchw", g, w[:, :, 0, 0], optimize=True)
        return gx
    gcols = np.tensordot(g, w, axes=([1], [0]))  # B, Ho, Wo, C, kh, kw
    gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
    gxp = _col2im(gcols, (B, C, H + 2 * padding, W + 2 * padding), stride)
    return np.ascontiguousarray(gxp[:, :, padding : padding + H, padding : padding + W])


def _conv_grad_weight(g: np.ndarray, x: np.ndarray, w_shape, stride: int, padding: int) -> np.ndarray:
    O, C, kh, kw = w_shape
    ho, wo = g.shape[2], g.shape[3]
    if kh == kw == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride]
        return np.einsum("bohw,bchw->oc", g, xs, optimize=True)[:, :, None, None]
    cols = _windows(_pad_hw(x, padding), kh, kw, stride, ho, wo)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (B, C, H, W) map with a (O, C, kh, kw) kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected rank-4 input and weight, got {x.shape} and {weight.shape}")
    O, C, kh, kw = weight.shape
    if x.shape[1] != C:
        raise ShapeError(f"conv2d: channel axis mismatch, input has {x.shape[1]} channels, weight expects {C}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match out channels {O}")
    _check_geometry(x.shape, kh, kw, stride, padding, "conv2d")
    out = _conv_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gx = _conv_grad_input(g, weight.data, x.shape, stride, padding) if x.requires_grad else None
        gw = _conv_grad_weight(g, x.data, weight.shape, stride, padding) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return custom(out, inputs, bw, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """One (kh, kw) filter per channel; weight is (C, 1, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: expected weight (C, 1, kh, kw), got {weight.shape}")
    C, _, kh, kw = weight.shape
    if x.shape[1] != C:
        raise ShapeError(f"depthwise_conv2d: channel count mismatch, input {x.shape[1]} vs weight {C}")
    if bias is not None and bias.shape != (C,):
        raise ShapeError(f"depthwise_conv2d: bias shape {bias.shape} does not match channels {C}")
    _check_geometry(x.shape, kh, kw, stride, padding, "depthwise_conv2d")
    B, _, H, W = x.shape
    ho = _out_extent(H, kh, stride, padding)
    wo = _out_extent(W, kw, stride, padding)
    xp = _pad_hw(x.data, padding)
    k = weight.data[:, 0]
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    out = np.zeros((B, C, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + hs : stride, j : j + ws : stride] * k[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += g * k[None, :, i, j, None, None]
            gx = np.ascontiguousarray(gxp[:, :, padding : padding + H, padding : padding + W])
        if weight.requires_grad:
            gw = np.empty(weight.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = (g * xp[:, :, i : i + hs : stride, j : j + ws : stride]).sum(axis=(0, 2, 3))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return custom(out, inputs, bw, "depthwise_conv2d")


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                      padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; weight is (C_in, C_out, kh, kw).

    Output extent is ``(H - 1) * stride - 2 * padding + kh + output_padding``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"transposed_conv2d: expected rank-4 input and weight, got {x.shape} and {weight.shape}")
    Ci, Co, kh, kw = weight.shape
    if x.shape[1] != Ci:
        raise ShapeError(f"transposed_conv2d: channel axis mismatch, input {x.shape[1]} vs weight {Ci}")
    if stride < 1 or padding < 0 or not 0 <= output_padding < stride:
        raise ValueError(f"transposed_conv2d: invalid stride/padding/output_padding ({stride}, {padding}, {output_padding})")
    B, _, H, W = x.shape
    ho = (H - 1) * stride - 2 * padding + kh + output_padding
    wo = (W - 1) * stride - 2 * padding + kw + output_padding
    if ho <= 0 or wo <= 0 or padding >= kh or padding >= kw:
        raise ValueError(f"transposed_conv2d: padding {padding} too large for kernel {kh}x{kw}")
    if bias is not None and bias.shape != (Co,):
        raise ShapeError(f"transposed_conv2d: bias shape {bias.shape} does not match out channels {Co}")
    out = _conv_grad_input(x.data, weight.data, (B, Co, ho, wo), stride, padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gx = _conv_forward(g, weight.data, stride, padding)[:, :, :H, :W] if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            cols = _windows(_pad_hw(g, padding), kh, kw, stride, H, W)
            gw = np.tensordot(x.data, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return custom(out, inputs, bw, "transposed_conv2d")


def masked_min_pool(depth: np.ndarray, k: int) -> np.ndarray:
    """Stride-1, same-size min pooling over positive entries; 0 where a window has none.

    Not differentiable: it only ever sees raw sparse measurements.
    """
    r = k // 2
    filled = np.where(depth > 0, depth, np.inf)
    filled = np.pad(filled, ((0, 0), (0, 0), (r, r), (r, r)), constant_values=np.inf)
    pooled = sliding_window_view(filled, (k, k), axis=(2, 3)).min(axis=(-2, -1))
    return np.where(np.isfinite(pooled), pooled, 0).astype(depth.dtype)
