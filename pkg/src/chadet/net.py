"""Depth-completion network built on :mod:`chadet.tensor`.

Data flow (default 4 stages, H x W input):

    sparse --min-pool/fuse--> quasi-dense --E_depth--> X_depth[s]
    rgb ----------------------------------E_rgb----> X_rgb[s]
    for s = coarsest..finest:
        Z_k = decoder_stage(X_rgb[s], X_depth[s], Z_{k-1}, pos[s])
        Z_{k-1} = upsample_stage(Z_k, skip[s-1])
    depth = depth_from_inverse(head(Z))
"""
from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .conv import conv2d, depthwise_conv2d, masked_min_pool, transposed_conv2d
from .geometry import Intrinsics, backproject
from .tensor import ShapeError, Tensor

LEAKY_SLOPE = 0.1
MIN_POOL_SIZES = (3, 5, 7)


@dataclass
class StageConfig:
    channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    windows: list = field(default_factory=lambda: [2, 2, 4, 4])
    heads: list = field(default_factory=lambda: [4, 4, 4, 4])
    se_reduction: int = 4
    s2d_hidden: int = 8

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        self.windows = [int(w) for w in self.windows]
        if isinstance(self.heads, int):
            self.heads = [self.heads] * len(self.channels)
        self.heads = [int(h) for h in self.heads]
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    def head_dims(self, stage: int) -> tuple[int, int, int]:
        """(d_q, d_k, d_v) for one head at ``stage``."""
        c, n = self.channels[stage], self.heads[stage]
        return max(c // (2 * n), 1), max(c // (2 * n), 1), c // n

    def validate(self) -> None:
        if not (len(self.channels) == len(self.windows) == len(self.heads)) or not self.channels:
            raise ValueError("channels, windows and heads must list one entry per stage")
        for s, (c, w, n) in enumerate(zip(self.channels, self.windows, self.heads)):
            if c <= 0 or w <= 0 or n <= 0:
                raise ValueError(f"stage {s}: channels, window and heads must be positive")
            if c % n:
                raise ValueError(f"stage {s}: {n} heads do not divide {c} channels")
            if c % self.se_reduction:
                raise ValueError(f"stage {s}: squeeze-excite reduction {self.se_reduction} does not divide {c}")

    def required_divisor(self) -> int:
        """Smallest number every input side must be a multiple of."""
        d = 1
        for s, w in enumerate(self.windows):
            d = math.lcm(d, w * 2 ** (s + 1))
        return d

    def check_input_size(self, height: int, width: int) -> None:
        d = self.required_divisor()
        if height % d or width % d:
            raise ShapeError(
                f"input size {height}x{width} incompatible with stage config: "
                f"height and width must be divisible by {d} (2^stages and window sizes)")


@dataclass(frozen=True)
class DepthRange:
    min_d: float = 0.5
    max_d: float = 20.0

    def __post_init__(self):
        if not 0 < self.min_d < self.max_d:
            raise ValueError(f"need 0 < min_d < max_d, got {self.min_d}, {self.max_d}")

    @property
    def lower_bound(self) -> float:
        return self.min_d * self.max_d / (self.max_d + self.min_d)


class ChadetParams(Mapping):
    """Named learnable tensors plus the stage configuration they were built for.

    Iteration is lexicographic by parameter path.
    """

    def __init__(self, tensors: dict, config: StageConfig):
        self._tensors = dict(tensors)
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self._tensors[name] = value

    def __iter__(self):
        return iter(sorted(self._tensors))

    def __len__(self):
        return len(self._tensors)

    def count(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def clone(self) -> "ChadetParams":
        return ChadetParams({k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.dtype)
                             for k, v in self._tensors.items()}, self.config)

    def astype(self, dtype) -> "ChadetParams":
        return ChadetParams({k: Tensor(v.data, requires_grad=v.requires_grad, dtype=dtype)
                             for k, v in self._tensors.items()}, self.config)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None


# -- parameter layout ---------------------------------------------------------

def _conv_spec(name, out_c, in_c, k, init="fan_in"):
    return {f"{name}.weight": ((out_c, in_c, k, k), init, in_c * k * k),
            f"{name}.bias": ((out_c,), "zero", None)}


def _dw_spec(name, c, k=3):
    return {f"{name}.weight": ((c, 1, k, k), "fan_in", k * k), f"{name}.bias": ((c,), "zero", None)}


def _se_spec(name, c, r):
    spec = _conv_spec(f"{name}.fc1", c // r, c, 1)
    spec.update(_conv_spec(f"{name}.fc2", c, c // r, 1, init="zero"))
    return spec


def param_layout(config: StageConfig) -> dict:
    """Map parameter path -> (shape, init kind, fan-in)."""
    ch, r = config.channels, config.se_reduction
    spec: dict = {}
    hid = config.s2d_hidden
    spec.update(_conv_spec("s2d.fuse1", hid, len(MIN_POOL_SIZES), 1))
    spec.update(_conv_spec("s2d.fuse2", 1, hid, 1))
    for branch, in_c in (("rgb", 3), ("depth", 1)):
        prev = in_c
        for s, c in enumerate(ch):
            p = f"enc_{branch}.stage{s}"
            spec.update(_dw_spec(f"{p}.dw1", prev))
            spec.update(_conv_spec(f"{p}.pw", c, prev, 1))
            spec.update(_dw_spec(f"{p}.dw2", c))
            spec.update(_se_spec(f"{p}.se", c, r))
            prev = c
    spec.update(_conv_spec("stem", ch[0], 4, 3))
    for s, c in enumerate(ch):
        p = f"dec.stage{s}"
        dq, dk, dv = config.head_dims(s)
        hc = c // config.heads[s]
        spec.update(_conv_spec(f"{p}.fuse", c, 2 * c, 3))
        spec.update(_conv_spec(f"{p}.pos", c, 3, 1))
        for ref in ("ref_rgbd", "ref_depth"):
            spec.update(_dw_spec(f"{p}.{ref}.dw", c))
            spec.update(_conv_spec(f"{p}.{ref}.conv", c, c, 3))
        spec[f"{p}.attn.wq"] = ((hc, dq), "fan_in", hc)
        spec[f"{p}.attn.wk"] = ((hc, dk), "fan_in", hc)
        spec[f"{p}.attn.wv"] = ((hc, dv), "fan_in", hc)
        spec.update(_conv_spec(f"{p}.attn.proj", c, c, 1))
        nxt = ch[s - 1] if s > 0 else ch[0]
        u = f"up.stage{s}"
        spec.update(_dw_spec(f"{u}.res1.dw", c))
        spec.update(_conv_spec(f"{u}.res1.conv", c, c, 3))
        spec[f"{u}.tconv.weight"] = ((c, nxt, 3, 3), "fan_in", c * 9)
        spec[f"{u}.tconv.bias"] = ((nxt,), "zero", None)
        spec.update(_se_spec(f"{u}.se", nxt, r))
        spec.update(_dw_spec(f"{u}.res2.dw", nxt))
        spec.update(_conv_spec(f"{u}.res2.conv", nxt, nxt, 3))
    spec.update(_conv_spec("head", 1, ch[0], 3))
    return spec


def init_params(config: StageConfig | None = None, seed: int = 0) -> ChadetParams:
    """Fan-in scaled uniform weights, zero biases, zero squeeze-excite output layers."""
    config = config or StageConfig()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, (shape, kind, fan_in) in sorted(param_layout(config).items()):
        if kind == "zero":
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    _init_s2d_as_mean(tensors)
    return ChadetParams(tensors, config)


def _init_s2d_as_mean(tensors) -> None:
    # Start the fusion as the mean of the pooled maps so the quasi-dense map is a
    # usable depth estimate from step zero; the extra hidden units stay random.
    w1 = tensors["s2d.fuse1.weight"].data
    n = len(MIN_POOL_SIZES)
    w1[:n] = 0.0
    w1[np.arange(n), np.arange(n)] = 1.0
    w2 = tensors["s2d.fuse2.weight"].data
    w2[:] = 0.0
    w2[0, :n] = 1.0 / n


def param_count(params) -> int:
    if isinstance(params, ChadetParams):
        return params.count()
    if isinstance(params, StageConfig):
        return sum(int(np.prod(shape)) for shape, _, _ in param_layout(params).values())
    return sum(t.size for t in (params.values() if isinstance(params, Mapping) else params))


# -- building blocks ----------------------------------------------------------

def act(x: Tensor) -> Tensor:
    return T.leaky_relu(x, LEAKY_SLOPE)


def _conv(x, params, name, stride=1, padding=None):
    w = params[f"{name}.weight"]
    pad = w.shape[-1] // 2 if padding is None else padding
    return conv2d(x, w, params[f"{name}.bias"], stride, pad)


def _dw(x, params, name, stride=1):
    w = params[f"{name}.weight"]
    return depthwise_conv2d(x, w, params[f"{name}.bias"], stride, w.shape[-1] // 2)


def _dw_conv_residual(x, params, name):
    return x + _conv(_dw(x, params, f"{name}.dw"), params, f"{name}.conv")


def squeeze_excite(x: Tensor, params, prefix: str, reduction: int | None = None) -> Tensor:
    """Scale each channel of ``x`` by a sigmoid gate from globally pooled statistics."""
    c = x.shape[1]
    hidden = params[f"{prefix}.fc1.weight"].shape[0]
    if reduction is not None and (c % reduction or c // reduction != hidden):
        raise ValueError(f"squeeze-excite reduction {reduction} does not divide {c} channels into {hidden}")
    pooled = T.global_avg_pool(x)
    h = act(_conv(pooled, params, f"{prefix}.fc1"))
    gates = T.sigmoid(_conv(h, params, f"{prefix}.fc2"))
    return x * gates


def encoder_stage(x: Tensor, params, stage: int, branch: str = "rgb") -> Tensor:
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"encoder stage {stage}: spatial extent {x.shape[2]}x{x.shape[3]} is not even")
    p = f"enc_{branch}.stage{stage}"
    y = _dw(x, params, f"{p}.dw1", stride=2)
    y = act(_conv(y, params, f"{p}.pw"))
    y = act(_dw(y, params, f"{p}.dw2"))
    return squeeze_excite(y, params, f"{p}.se")


def min_pool_pyramid(z0: np.ndarray) -> np.ndarray:
    """Validity-masked min pooling at every scale in MIN_POOL_SIZES, stacked on channels."""
    return np.concatenate([masked_min_pool(z0, k) for k in MIN_POOL_SIZES], axis=1)


def sparse_to_dense(z0: Tensor, params) -> Tensor:
    """Quasi-dense depth from a sparse map (0 = no measurement)."""
    raw = z0.data if isinstance(z0, Tensor) else np.asarray(z0)
    if raw.ndim != 4 or raw.shape[1] != 1:
        raise ShapeError(f"sparse_to_dense expects (B, 1, H, W), got {raw.shape}")
    if (raw < 0).any():
        raise ValueError("sparse depth must be non-negative (0 marks a missing measurement)")
    dtype = params["s2d.fuse1.weight"].dtype
    pooled = Tensor(min_pool_pyramid(raw), dtype=dtype)
    h = act(_conv(pooled, params, "s2d.fuse1"))
    return _conv(h, params, "s2d.fuse2")


def avg_pool(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise ShapeError(f"avg_pool: {H}x{W} not divisible by {factor}")
    return T.mean(T.reshape(x, (B, C, H // factor, factor, W // factor, factor)), axis=(3, 5))


def positional_encoding_3d(quasi_dense: Tensor, intrinsics) -> Tensor:
    """Camera-frame (x, y, z) of every pixel at its quasi-dense depth."""
    return backproject(quasi_dense, intrinsics)


def window_partition(x: Tensor, w: int) -> Tensor:
    """(B, C, H, W) -> (B, nWin, w*w, C) non-overlapping windows in row-major order."""
    B, C, H, W = x.shape
    t = T.reshape(x, (B, C, H // w, w, W // w, w))
    t = T.transpose(t, (0, 2, 4, 3, 5, 1))
    return T.reshape(t, (B, (H // w) * (W // w), w * w, C))


def window_merge(tokens: Tensor, w: int, height: int, width: int) -> Tensor:
    B, _, _, C = tokens.shape
    t = T.reshape(tokens, (B, height // w, width // w, w, w, C))
    t = T.transpose(t, (0, 5, 1, 3, 2, 4))
    return T.reshape(t, (B, C, height, width))


def cross_hierarchical_attention(x_rgbd: Tensor, x_depth: Tensor, params, stage: int, *,
                                 hierarchical: bool = True, return_heads: bool = False):
    """Windowed cross-attention with depth queries and RGBD keys/values.

    Head i attends with keys/values from ``X_rgbd^i + CrossAtt^{i-1}``
    (``CrossAtt^0 = 0``). With ``return_heads`` the pre-projection
    concatenation is returned alongside the projected output.
    """
    cfg = params.config
    n, w = cfg.heads[stage], cfg.windows[stage]
    B, C, H, W = x_rgbd.shape
    if x_depth.shape != x_rgbd.shape:
        raise ShapeError(f"attention inputs differ in shape: {x_rgbd.shape} vs {x_depth.shape}")
    if C % n:
        raise ShapeError(f"stage {stage}: {n} heads do not divide {C} channels")
    if H % w or W % w:
        raise ShapeError(f"stage {stage}: window {w} does not divide feature map {H}x{W}")
    p = f"dec.stage{stage}.attn"
    wq, wk, wv = params[f"{p}.wq"], params[f"{p}.wk"], params[f"{p}.wv"]
    scale = 1.0 / math.sqrt(wk.shape[1])
    rgbd_heads = T.split_channels(x_rgbd, n)
    depth_heads = T.split_channels(x_depth, n)
    outputs = []
    prev = None
    for i in range(n):
        q = T.matmul(window_partition(depth_heads[i], w), wq)
        kv_in = window_partition(rgbd_heads[i], w)
        if prev is not None and hierarchical:
            kv_in = kv_in + prev
        k = T.matmul(kv_in, wk)
        v = T.matmul(kv_in, wv)
        scores = T.mul_scalar(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
        att = T.matmul(T.softmax(scores, axis=-1), v)
        outputs.append(att)
        prev = att
    cat = window_merge(T.concat(outputs, axis=3), w, H, W)
    out = _conv(cat, params, f"{p}.proj")
    if return_heads:
        return out, cat
    return out


def decoder_stage(x_rgb: Tensor, x_depth: Tensor, z_prev: Tensor, pos_enc: Tensor, params, stage: int) -> Tensor:
    """One transformer decoder block; ``pos_enc`` is the 3-channel point map at this resolution."""
    for name, t in (("x_depth", x_depth), ("z_prev", z_prev)):
        if t.shape != x_rgb.shape:
            raise ShapeError(f"decoder stage {stage}: {name} shape {t.shape} != x_rgb shape {x_rgb.shape}")
    if pos_enc.shape[2:] != x_rgb.shape[2:]:
        raise ShapeError(f"decoder stage {stage}: positional encoding {pos_enc.shape} at wrong resolution")
    p = f"dec.stage{stage}"
    x_rgbd = _conv(T.concat_channels([x_rgb, z_prev]), params, f"{p}.fuse")
    x_rgbd = x_rgbd + _conv(pos_enc, params, f"{p}.pos")
    x_rgbd = _dw_conv_residual(x_rgbd, params, f"{p}.ref_rgbd")
    x_dep = _dw_conv_residual(x_depth, params, f"{p}.ref_depth")
    return cross_hierarchical_attention(x_rgbd, x_dep, params, stage)


def upsample_stage(z_k: Tensor, enc_skip: Tensor, params, stage: int) -> Tensor:
    """Residual refine, 2x transposed conv, squeeze-excite, add the skip, refine again."""
    u = f"up.stage{stage}"
    B, C, H, W = z_k.shape
    out_c = params[f"{u}.tconv.weight"].shape[1]
    if enc_skip.shape != (B, out_c, 2 * H, 2 * W):
        raise ShapeError(f"upsample stage {stage}: skip shape {enc_skip.shape}, expected {(B, out_c, 2 * H, 2 * W)}")
    y = act(_dw_conv_residual(z_k, params, f"{u}.res1"))
    y = transposed_conv2d(y, params[f"{u}.tconv.weight"], params[f"{u}.tconv.bias"],
                          stride=2, padding=1, output_padding=1)
    y = squeeze_excite(act(y), params, f"{u}.se")
    y = y + enc_skip
    return act(_dw_conv_residual(y, params, f"{u}.res2"))


def depth_from_inverse(z_k: Tensor, depth_range: DepthRange) -> Tensor:
    """min_d / (sigmoid(z_k) + min_d / max_d)."""
    s = T.sigmoid(z_k)
    return T.div(depth_range.min_d, T.add_scalar(s, depth_range.min_d / depth_range.max_d))


@dataclass
class ForwardOutputs:
    depth: Tensor
    logits: Tensor
    quasi_dense: Tensor


def chadet_forward(rgb: Tensor, sparse: Tensor, params: ChadetParams, config: StageConfig | None = None,
                   depth_range: DepthRange | None = None, intrinsics=None, full: bool = False):
    """Dense depth in meters, (B, 1, H, W), from RGB in [0, 1] and sparse depth."""
    config = config or params.config
    depth_range = depth_range or DepthRange()
    rgb, sparse = T.as_tensor(rgb), T.as_tensor(sparse)
    B, _, H, W = rgb.shape
    if rgb.shape[1] != 3 or sparse.shape != (B, 1, H, W):
        raise ShapeError(f"expected rgb (B, 3, H, W) and sparse (B, 1, H, W), got {rgb.shape} and {sparse.shape}")
    config.check_input_size(H, W)
    if config.channels != params.config.channels:
        raise ShapeError(f"params built for channels {params.config.channels}, config asks for {config.channels}")
    if intrinsics is None:
        intrinsics = Intrinsics.default_for(H, W)
    norm = 1.0 / depth_range.max_d

    quasi = sparse_to_dense(sparse, params)
    quasi_n = T.mul_scalar(quasi, norm)
    points = T.mul_scalar(positional_encoding_3d(quasi, intrinsics), norm)

    feats_rgb, feats_depth = [], []
    xr, xd = rgb, quasi_n
    for s in range(config.num_stages):
        xr = encoder_stage(xr, params, s, "rgb")
        xd = encoder_stage(xd, params, s, "depth")
        feats_rgb.append(xr)
        feats_depth.append(xd)
    stem = act(_conv(T.concat_channels([rgb, quasi_n]), params, "stem"))

    z = Tensor(np.zeros(feats_rgb[-1].shape), dtype=rgb.dtype)
    for s in reversed(range(config.num_stages)):
        pos = avg_pool(points, 2 ** (s + 1))
        z_k = decoder_stage(feats_rgb[s], feats_depth[s], z, pos, params, s)
        skip = feats_depth[s - 1] if s > 0 else stem
        z = upsample_stage(z_k, skip, params, s)
    logits = _conv(z, params, "head")
    depth = depth_from_inverse(logits, depth_range)
    if full:
        return ForwardOutputs(depth, logits, quasi)
    return depth
