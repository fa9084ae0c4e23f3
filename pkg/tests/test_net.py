import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chadet import tensor as T
from chadet.conv import masked_min_pool
from chadet.geometry import Intrinsics
from chadet.net import (
    DepthRange, StageConfig, chadet_forward, cross_hierarchical_attention, decoder_stage,
    depth_from_inverse, encoder_stage, init_params, min_pool_pyramid, param_count,
    positional_encoding_3d, sparse_to_dense, squeeze_excite, upsample_stage,
)
from chadet.tensor import ShapeError, Tape, Tensor, precision

from oracles import brute_attention, naive_min_pool


def _params64(cfg, seed=0):
    p = init_params(cfg, seed).astype(np.float64)
    r = np.random.default_rng(seed + 100)
    for k in p:   # break the zero-initialised gates and biases so every path is exercised
        if k.endswith("fc2.weight") or k.endswith(".bias"):
            p[k].data = r.normal(scale=0.1, size=p[k].shape)
    return p


# -- parameter count ---------------------------------------------------------

def test_default_param_count_near_published_size():
    n = param_count(StageConfig())
    assert 0.8e6 <= n <= 1.5e6


def test_wider_channels_strictly_larger():
    assert param_count(StageConfig(channels=[32, 64, 128, 256])) > param_count(StageConfig())


def test_param_count_agrees_between_config_and_params():
    cfg = StageConfig()
    assert param_count(init_params(cfg)) == param_count(cfg)


def test_stage_config_validation():
    with pytest.raises(ValueError, match="heads"):
        StageConfig(channels=[16, 32, 64, 130])
    with pytest.raises(ValueError):
        StageConfig(channels=[16, 32], windows=[2, 2, 4])
    assert StageConfig().head_dims(0) == (2, 2, 4)
    assert StageConfig().head_dims(3) == (16, 16, 32)


def test_input_size_must_match_window_pyramid():
    cfg = StageConfig()
    cfg.check_input_size(64, 64)
    with pytest.raises(ShapeError):
        cfg.check_input_size(48, 64)


# -- squeeze-excite / encoder ---------------------------------------------------

def test_squeeze_excite_is_half_gate_at_init():
    p = init_params()
    x = Tensor(np.random.default_rng(0).normal(size=(2, 16, 8, 8)))
    out = squeeze_excite(x, p, "enc_rgb.stage0.se")
    np.testing.assert_allclose(out.data, 0.5 * x.data, rtol=1e-6)


def test_squeeze_excite_zero_input_and_bad_reduction():
    p = init_params()
    out = squeeze_excite(Tensor(np.zeros((1, 16, 4, 4))), p, "enc_rgb.stage0.se")
    assert np.all(out.data == 0)
    with pytest.raises(ValueError, match="reduction"):
        squeeze_excite(Tensor(np.zeros((1, 16, 4, 4))), p, "enc_rgb.stage0.se", reduction=3)


def test_squeeze_excite_gates_in_unit_interval():
    p = _params64(StageConfig())
    x = Tensor(np.random.default_rng(1).normal(size=(1, 16, 4, 4)) * 10, dtype=np.float64)
    ratio = squeeze_excite(x, p, "enc_rgb.stage0.se").data / x.data
    per_channel = ratio[0, :, 0, 0]
    assert np.all((per_channel > 0) & (per_channel < 1))
    np.testing.assert_allclose(ratio, per_channel[None, :, None, None] * np.ones_like(ratio))


def test_encoder_stage_shapes():
    p = init_params()
    x = Tensor(np.zeros((1, 3, 64, 64)))
    y = encoder_stage(x, p, 0, "rgb")
    assert y.shape == (1, 16, 32, 32)
    assert encoder_stage(y, p, 1, "rgb").shape == (1, 32, 16, 16)
    with pytest.raises(ShapeError):
        encoder_stage(Tensor(np.zeros((1, 3, 63, 64))), p, 0)


def test_encoder_gradients_reach_every_stage_parameter():
    p = _params64(StageConfig())
    x = Tensor(np.random.default_rng(2).normal(size=(1, 3, 16, 16)), dtype=np.float64)
    with precision(np.float64), Tape() as tape:
        tape.backward(T.sum_(T.mul(encoder_stage(x, p, 0, "rgb"), encoder_stage(x, p, 0, "rgb"))))
    for k in p:
        if k.startswith("enc_rgb.stage0."):
            assert p[k].grad is not None and np.any(p[k].grad != 0), k


# -- sparse to dense ---------------------------------------------------------------

def test_min_pool_single_point_dilation():
    z = np.zeros((1, 1, 9, 9), np.float32)
    z[0, 0, 4, 4] = 5.0
    pyr = min_pool_pyramid(z)
    for level, k in enumerate((3, 5, 7)):
        r = k // 2
        expected = np.zeros((9, 9))
        expected[4 - r:5 + r, 4 - r:5 + r] = 5.0
        np.testing.assert_array_equal(pyr[0, level], expected)


def test_min_pool_constant_and_two_points():
    np.testing.assert_array_equal(min_pool_pyramid(np.full((1, 1, 6, 6), 3.0)), 3.0)
    z = np.zeros((1, 1, 1, 9))
    z[0, 0, 0, 2], z[0, 0, 0, 6] = 2.0, 8.0
    pyr = min_pool_pyramid(z)
    np.testing.assert_array_equal(pyr[0, 0, 0], [0, 2, 2, 2, 0, 8, 8, 8, 0])
    np.testing.assert_array_equal(pyr[0, 2, 0], [2, 2, 2, 2, 2, 2, 8, 8, 8])


@given(st.integers(0, 10_000), st.sampled_from([3, 5, 7]))
def test_min_pool_matches_loop_oracle(seed, k):
    r = np.random.default_rng(seed)
    z = np.where(r.random((7, 8)) < 0.2, r.uniform(0.5, 20, (7, 8)), 0.0)
    np.testing.assert_array_equal(masked_min_pool(z[None, None], k)[0, 0], naive_min_pool(z, k))


def test_sparse_to_dense_covers_neighbourhood_and_rejects_negative():
    z = np.zeros((1, 1, 16, 16), np.float32)
    z[0, 0, 8, 8] = 4.0
    pyr = min_pool_pyramid(z)
    assert np.all(pyr.max(axis=1)[0, 5:12, 5:12] > 0)
    p = init_params()
    out = sparse_to_dense(Tensor(z), p)
    assert out.shape == (1, 1, 16, 16)
    with pytest.raises(ValueError, match="non-negative"):
        sparse_to_dense(Tensor(-z), p)


def test_sparse_to_dense_starts_as_mean_of_pooled_maps():
    z = np.zeros((1, 1, 9, 9), np.float32)
    z[0, 0, 4, 4] = 6.0
    out = sparse_to_dense(Tensor(z), init_params()).data[0, 0]
    assert out[4, 4] == pytest.approx(6.0, rel=1e-6)
    assert out[4, 7] == pytest.approx(2.0, rel=1e-6)   # only the 7x7 map reaches three pixels away


# -- positional encoding --------------------------------------------------------------

def test_positional_encoding_centre_pixel_on_axis():
    K = Intrinsics(10.0, 10.0, 2.0, 2.0)
    pe = positional_encoding_3d(Tensor(np.full((1, 1, 5, 5), 4.0)), K).data
    np.testing.assert_allclose(pe[0, :, 2, 2], [0, 0, 4], atol=1e-6)
    np.testing.assert_allclose(pe[0, :, 2, 4], [0.8, 0, 4], atol=1e-6)
    np.testing.assert_allclose(pe[0, 2], 4.0)


def test_positional_encoding_zero_depth_gives_origin():
    pe = positional_encoding_3d(Tensor(np.zeros((1, 1, 4, 4))), Intrinsics.default_for(4, 4)).data
    assert np.all(pe == 0)


# -- attention ------------------------------------------------------------------------

def _attn_setup(heads, window, seed, c=16, size=4):
    cfg = StageConfig(channels=[c] * 4, windows=[window] * 4, heads=[heads] * 4)
    p = _params64(cfg, seed)
    r = np.random.default_rng(seed)
    xr = r.normal(size=(2, c, size, size))
    xd = r.normal(size=(2, c, size, size))
    return cfg, p, xr, xd


@pytest.mark.parametrize("heads", [1, 2, 4])
@pytest.mark.parametrize("window", [1, 2, 4])
def test_attention_matches_brute_force(heads, window):
    for seed in range(3):
        cfg, p, xr, xd = _attn_setup(heads, window, seed)
        pre = "dec.stage0.attn"
        with precision(np.float64):
            out, cat = cross_hierarchical_attention(Tensor(xr, dtype=np.float64), Tensor(xd, dtype=np.float64),
                                                    p, 0, return_heads=True)
        ref, ref_cat = brute_attention(xr, xd, p[f"{pre}.wq"].data, p[f"{pre}.wk"].data, p[f"{pre}.wv"].data,
                                       p[f"{pre}.proj.weight"].data, p[f"{pre}.proj.bias"].data, heads, window)
        np.testing.assert_allclose(cat.data, ref_cat, atol=1e-9)
        np.testing.assert_allclose(out.data, ref, atol=1e-9)


def test_attention_single_token_window_ignores_depth():
    cfg, p, xr, xd = _attn_setup(1, 1, 0)
    with precision(np.float64):
        a = cross_hierarchical_attention(Tensor(xr), Tensor(xd), p, 0).data
        b = cross_hierarchical_attention(Tensor(xr), Tensor(np.zeros_like(xd)), p, 0).data
        v = np.einsum("bchw,cd->bdhw", xr, p["dec.stage0.attn.wv"].data)
    np.testing.assert_array_equal(a, b)
    expected = np.einsum("oc,bchw->bohw", p["dec.stage0.attn.proj.weight"].data[:, :, 0, 0], v)
    np.testing.assert_allclose(a, expected + p["dec.stage0.attn.proj.bias"].data[None, :, None, None])


def test_attention_head_causality():
    cfg, p, xr, xd = _attn_setup(4, 2, 5)
    with precision(np.float64):
        _, base = cross_hierarchical_attention(Tensor(xr), Tensor(xd), p, 0, return_heads=True)
        bumped = xr.copy()
        bumped[:, 4:8] += 1.0              # head 2 of 4 (channels 4..7)
        _, alt = cross_hierarchical_attention(Tensor(bumped), Tensor(xd), p, 0, return_heads=True)
    assert np.array_equal(base.data[:, :4], alt.data[:, :4])
    for h in range(1, 4):
        assert not np.array_equal(base.data[:, 4 * h:4 * h + 4], alt.data[:, 4 * h:4 * h + 4]), h


def test_attention_without_hierarchy_decouples_heads():
    cfg, p, xr, xd = _attn_setup(4, 2, 6)
    bumped = xr.copy()
    bumped[:, 4:8] += 1.0      # stays inside head 2 once the chaining is off
    with precision(np.float64):
        _, a = cross_hierarchical_attention(Tensor(xr), Tensor(xd), p, 0, hierarchical=False, return_heads=True)
        _, b = cross_hierarchical_attention(Tensor(bumped), Tensor(xd), p, 0, hierarchical=False, return_heads=True)
    assert np.array_equal(a.data[:, 8:], b.data[:, 8:])


def test_attention_errors():
    cfg = StageConfig(channels=[16] * 4, windows=[3] * 4, heads=[4] * 4)
    p = init_params(cfg)
    with pytest.raises(ShapeError, match="window"):
        cross_hierarchical_attention(Tensor(np.zeros((1, 16, 4, 4))), Tensor(np.zeros((1, 16, 4, 4))), p, 0)
    with pytest.raises(ShapeError):
        cross_hierarchical_attention(Tensor(np.zeros((1, 16, 6, 6))), Tensor(np.zeros((1, 16, 3, 3))), p, 0)


# -- decoder / upsample -------------------------------------------------------------------

def test_decoder_stage_shape_and_depth_sensitivity():
    p = _params64(StageConfig())
    r = np.random.default_rng(3)
    x = Tensor(r.normal(size=(1, 128, 4, 4)))
    xd = Tensor(r.normal(size=(1, 128, 4, 4)))
    z0 = Tensor(np.zeros((1, 128, 4, 4)))
    pos = Tensor(r.normal(size=(1, 3, 4, 4)))
    with precision(np.float64):
        out = decoder_stage(x, xd, z0, pos, p, 3)
        zeroed = decoder_stage(x, Tensor(np.zeros((1, 128, 4, 4))), z0, pos, p, 3)
    assert out.shape == x.shape
    assert np.max(np.abs(out.data - zeroed.data)) > 0
    with pytest.raises(ShapeError):
        decoder_stage(x, xd, Tensor(np.zeros((1, 128, 2, 2))), pos, p, 3)


def test_upsample_stage_shape_and_skip_gradient():
    p = _params64(StageConfig())
    r = np.random.default_rng(4)
    z = Tensor(r.normal(size=(1, 128, 4, 4)))
    skip = Tensor(r.normal(size=(1, 64, 8, 8)), requires_grad=True)
    with precision(np.float64), Tape() as tape:
        out = upsample_stage(z, skip, p, 3)
        tape.backward(T.sum_(out * out))
    assert out.shape == (1, 64, 8, 8)
    assert np.any(skip.grad != 0)
    with pytest.raises(ShapeError, match="skip"):
        upsample_stage(z, Tensor(np.zeros((1, 64, 4, 4))), p, 3)


@pytest.mark.parametrize("size", [2, 6, 10])
def test_upsample_doubles_any_even_extent(size):
    p = init_params()
    out = upsample_stage(Tensor(np.ones((1, 32, size, size))), Tensor(np.zeros((1, 16, 2 * size, 2 * size))), p, 1)
    assert out.shape == (1, 16, 2 * size, 2 * size)


# -- depth head --------------------------------------------------------------------------

def test_depth_head_examples():
    r = DepthRange(0.1, 10.0)
    assert depth_from_inverse(Tensor([0.0]), r).data[0] == pytest.approx(0.1 / 0.51, rel=1e-5)
    assert depth_from_inverse(Tensor([-60.0], dtype=np.float64), r).data[0] == pytest.approx(10.0, rel=1e-12)
    assert r.lower_bound == pytest.approx(0.1 * 10 / 10.1)


@given(st.floats(-30, 30), st.floats(1e-3, 5), st.floats(1.5, 100))
def test_depth_head_strict_bounds_and_monotone(z, min_d, ratio):
    r = DepthRange(min_d, min_d * ratio)
    with precision(np.float64):
        d = depth_from_inverse(Tensor([z, z + 0.01]), r).data
    assert r.lower_bound < d[0] < r.max_d
    assert d[1] < d[0]


def test_depth_head_closed_bounds_over_full_logit_range():
    r = DepthRange()
    z = np.linspace(-50, 50, 20001)
    with precision(np.float64):
        d = depth_from_inverse(Tensor(z), r).data
    assert np.all((d >= r.lower_bound) & (d <= r.max_d))
    assert np.all(np.diff(d) <= 0)


@pytest.mark.xfail(strict=True, reason="sigmoid saturates in float64 beyond |z| ~ 36; the output then "
                                        "equals the bound instead of lying strictly inside it")
def test_depth_head_strict_at_saturated_logits():
    r = DepthRange()
    with precision(np.float64):
        d = depth_from_inverse(Tensor([-50.0, 50.0]), r).data
    assert d[0] < r.max_d and d[1] > r.lower_bound


def test_depth_range_validation():
    with pytest.raises(ValueError):
        DepthRange(5.0, 1.0)


# -- full forward -------------------------------------------------------------------------

def test_forward_shape_range_and_quasi_dense():
    p = init_params()
    r = np.random.default_rng(5)
    rgb = Tensor(r.random((2, 3, 64, 64)))
    sparse = np.where(r.random((2, 1, 64, 64)) < 0.3, r.uniform(1, 15, (2, 1, 64, 64)), 0)
    out = chadet_forward(rgb, Tensor(sparse), p, full=True)
    rng_ = DepthRange()
    assert out.depth.shape == (2, 1, 64, 64)
    assert np.all((out.depth.data > rng_.lower_bound) & (out.depth.data < rng_.max_d))
    assert out.quasi_dense.shape == (2, 1, 64, 64)


def test_forward_rejects_bad_sizes():
    p = init_params()
    with pytest.raises(ShapeError):
        chadet_forward(Tensor(np.zeros((1, 3, 48, 48))), Tensor(np.zeros((1, 1, 48, 48))), p)
    with pytest.raises(ShapeError):
        chadet_forward(Tensor(np.zeros((1, 3, 64, 64))), Tensor(np.zeros((1, 1, 32, 32))), p)


def test_forward_deterministic():
    r = np.random.default_rng(6)
    rgb, sparse = r.random((1, 3, 32, 32)), np.where(r.random((1, 1, 32, 32)) < 0.3, 5.0, 0.0)
    cfg = StageConfig(windows=[2, 2, 2, 2])
    a = chadet_forward(Tensor(rgb), Tensor(sparse), init_params(cfg, 1)).data
    b = chadet_forward(Tensor(rgb), Tensor(sparse), init_params(cfg, 1)).data
    assert a.tobytes() == b.tobytes()


def test_every_parameter_receives_gradient():
    cfg = StageConfig(windows=[2, 2, 2, 2])
    p = _params64(cfg, 7)
    r = np.random.default_rng(7)
    rgb, sparse = r.random((1, 3, 32, 32)), np.where(r.random((1, 1, 32, 32)) < 0.3, r.uniform(1, 9, (1, 1, 32, 32)), 0)
    with precision(np.float64), Tape() as tape:
        d = chadet_forward(Tensor(rgb), Tensor(sparse), p)
        tape.backward(T.mean(d * d))
    dead = [k for k in p if p[k].grad is None or not np.any(p[k].grad != 0)]
    assert not dead, dead
