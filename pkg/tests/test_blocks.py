import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hsimamba import autodiff as ad
from hsimamba.autodiff import Tensor
from hsimamba.blocks import (ArchConfig, BlockParams, Conv3dLayer, Model, SstgParams, conv3d_forward,
                             layer_norm, mamba_block_forward, model_forward, model_logits,
                             pointwise_conv, silu, sstg_forward)
from hsimamba.routes import Route


def naive_conv3d(x, w, b):
    C_in, S, H, W = x.shape
    C_out, _, kS, kH, kW = w.shape
    out = np.zeros((C_out, S - kS + 1, H - kH + 1, W - kW + 1))
    for o in range(C_out):
        for s in range(out.shape[1]):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    acc = b[o]
                    for c in range(C_in):
                        for a in range(kS):
                            for u in range(kH):
                                for v in range(kW):
                                    acc += w[o, c, a, u, v] * x[c, s + a, i + u, j + v]
                    out[o, s, i, j] = acc
    return out


def layer(w, b):
    return Conv3dLayer(Tensor(np.asarray(w, float)), Tensor(np.asarray(b, float)))


# ------------------------------------------------------------------ conv

def test_conv_identity_pointwise():
    x = np.random.default_rng(0).standard_normal((1, 4, 5, 6))
    out = conv3d_forward(x, layer(np.ones((1, 1, 1, 1, 1)), [0.0]))
    np.testing.assert_array_equal(out.data, x)


def test_conv_sum_kernel():
    out = conv3d_forward(np.ones((1, 3, 3, 3)), layer(np.ones((1, 1, 3, 3, 3)), [0.0]))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 27.0


def test_conv_matches_naive_loops():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 5, 6, 7))
    w, b = rng.standard_normal((3, 2, 2, 3, 4)), rng.standard_normal(3)
    np.testing.assert_allclose(conv3d_forward(x, layer(w, b)).data, naive_conv3d(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv_kernel_too_large():
    with pytest.raises(ad.ShapeError):
        conv3d_forward(np.ones((1, 2, 3, 3)), layer(np.ones((1, 1, 3, 3, 3)), [0.0]))


def test_pointwise_conv_equals_conv3d_1x1x1():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 3, 4, 4, 5))              # n, S, H, W, C channels-last
    lay = layer(rng.standard_normal((6, 5, 1, 1, 1)), rng.standard_normal(6))
    via_conv = conv3d_forward(x[0].transpose(3, 0, 1, 2), lay).data.transpose(1, 2, 3, 0)
    np.testing.assert_allclose(pointwise_conv(x, lay).data[0], via_conv, rtol=1e-13, atol=1e-13)


# ------------------------------------------------------------- layer norm

def test_layer_norm_moments():
    x = np.random.default_rng(3).normal(4.0, 3.0, (2, 3, 3, 4, 5))
    y = layer_norm(x, np.ones((3, 3, 4, 1)), np.zeros((3, 3, 4, 1))).data
    assert np.abs(y.mean(axis=(1, 2, 3))).max() < 1e-9
    assert np.abs(y.var(axis=(1, 2, 3)) - 1).max() < 1e-6


def test_layer_norm_standardized_fixed_point():
    x = np.random.default_rng(4).standard_normal((2, 2, 2, 3, 2))
    x = (x - x.mean(axis=(1, 2, 3), keepdims=True)) / x.std(axis=(1, 2, 3), keepdims=True)
    y = layer_norm(x, np.ones((2, 2, 3, 1)), np.zeros((2, 2, 3, 1))).data
    np.testing.assert_allclose(y, x, rtol=0, atol=1e-9)


def test_layer_norm_gradient_on_tiny_variance_group():
    # channel 0 sits below the variance floor, channel 1 above it
    x = np.random.default_rng(6).standard_normal((1, 2, 2, 2, 2))
    x[..., 0] *= 1e-4
    one, zero = np.ones((2, 2, 2, 1)), np.zeros((2, 2, 2, 1))
    w = np.random.default_rng(7).standard_normal(x.shape)
    f = lambda v: float(np.sum(w * layer_norm(v, one, zero).data))
    t = Tensor(x, requires_grad=True)
    with ad.Tape() as tape:
        out = ad.sum_(ad.mul(layer_norm(t, one, zero), w))
    (g,) = tape.grad(out, [t])
    num = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = 1e-9
        num[i] = (f(x + e) - f(x - e)) / 2e-9
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-5 * np.abs(num).max())


def test_layer_norm_constant_input():
    y = layer_norm(np.full((1, 2, 2, 2, 3), 7.0), np.ones((2, 2, 2, 1)), np.zeros((2, 2, 2, 1))).data
    assert not y.any()


def test_silu_values():
    assert silu(Tensor(0.0)).data == 0.0
    assert 19.99999 < silu(Tensor(20.0)).data < 20.0


# ------------------------------------------------------------------- SSTG

def test_sstg_shapes():
    rng = np.random.default_rng(0)
    arch = ArchConfig(n_classes=3, patch_size=11, pca_dim=30, embed_dim=32)
    t = sstg_forward(rng.standard_normal((11, 11, 30)), SstgParams.init(arch, rng))
    assert t.data[0].transpose(3, 0, 1, 2).shape == (32, 7, 7, 28)
    arch = ArchConfig(n_classes=3, patch_size=13, pca_dim=30, embed_dim=8)
    t = sstg_forward(rng.standard_normal((2, 13, 13, 30)), SstgParams.init(arch, rng))
    assert t.shape == (2, 9, 9, 28, 8)


def test_sstg_zero_network():
    rng = np.random.default_rng(0)
    arch = ArchConfig(n_classes=2, patch_size=7, pca_dim=5, embed_dim=4)
    p = SstgParams.init(arch, rng)
    for t in p.parameters().values():
        t.data = np.zeros_like(t.data)
    for training in (False, True):
        assert not sstg_forward(rng.standard_normal((3, 7, 7, 5)), p, training).data.any()


def test_sstg_patch_too_small():
    arch = ArchConfig(n_classes=2, patch_size=7, pca_dim=5, embed_dim=4)
    p = SstgParams.init(arch, np.random.default_rng(0))
    with pytest.raises(ValueError, match="too small"):
        sstg_forward(np.zeros((3, 3, 5)), p)


def test_batch_norm_running_stats_update():
    rng = np.random.default_rng(1)
    arch = ArchConfig(n_classes=2, patch_size=5, pca_dim=3, embed_dim=2, conv_channels=4)
    p = SstgParams.init(arch, rng)
    sstg_forward(rng.standard_normal((4, 5, 5, 3)) + 3, p, training=True)
    assert np.abs(p.running_mean).max() > 0
    before = p.running_mean.copy()
    sstg_forward(rng.standard_normal((4, 5, 5, 3)), p, training=False)
    np.testing.assert_array_equal(p.running_mean, before)


# ------------------------------------------------------------------ 3DMB

def small_arch(route=5, **kw):
    base = dict(n_classes=3, patch_size=7, pca_dim=6, embed_dim=4, state_size=3, route=route)
    base.update(kw)
    return ArchConfig(**base)


@pytest.mark.parametrize("route", list(Route))
def test_block_preserves_shape(route):
    rng = np.random.default_rng(int(route))
    arch = small_arch(route)
    T = rng.standard_normal((2, arch.token_size, arch.token_size, arch.token_bands, arch.embed_dim))
    assert mamba_block_forward(T, BlockParams.init(arch, rng), route).shape == T.shape


def test_block_zero_lin_out_is_identity():
    rng = np.random.default_rng(0)
    arch = small_arch()
    p = BlockParams.init(arch, rng)
    p.lin_out.weight.data[...] = 0
    p.lin_out.bias.data[...] = 0
    T = rng.standard_normal((1, 3, 3, 4, 4))
    np.testing.assert_array_equal(mamba_block_forward(T, p, 5).data, T)


def test_block_residual_dominance():
    rng = np.random.default_rng(5)
    arch = small_arch()
    T = rng.standard_normal((1, 3, 3, 4, 4))
    prev = np.inf
    for scale in (1e-1, 1e-3, 1e-5):
        p = BlockParams.init(arch, np.random.default_rng(5))
        for name, t in p.parameters().items():
            if not any(s in name for s in ("norm", "A_log", "dt_bias")):
                t.data = t.data * scale
        diff = np.abs(mamba_block_forward(T, p, 5).data - T).max()
        assert diff < prev and diff <= scale
        prev = diff


def test_block_shape_mismatch():
    rng = np.random.default_rng(0)
    p = BlockParams.init(small_arch(), rng)
    with pytest.raises(ValueError, match="does not match"):
        mamba_block_forward(np.zeros((1, 2, 2, 4, 4)), p, 5)


# ------------------------------------------------------------------ model

def test_probabilities_sum_to_one():
    rng = np.random.default_rng(0)
    arch = small_arch()
    model = Model.init(arch, rng)
    probs = model_forward(rng.standard_normal((4, 7, 7, 6)), model)
    assert probs.shape == (4, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert (probs >= 0).all()


def test_zeroed_head_gives_uniform():
    rng = np.random.default_rng(0)
    model = Model.init(small_arch(), rng)
    model.head.out.weight.data[...] = 0
    model.head.out.bias.data[...] = 0
    np.testing.assert_allclose(model_forward(rng.standard_normal((7, 7, 6)), model), [1 / 3] * 3, rtol=1e-15)


def test_class_count_mismatch():
    model = Model.init(small_arch(), np.random.default_rng(0))
    with pytest.raises(ValueError, match="class count"):
        model_forward(np.zeros((7, 7, 6)), model, n_classes=4)


def test_zero_depth_model_skips_blocks():
    rng = np.random.default_rng(0)
    model = Model.init(small_arch(depth=0), rng)
    assert model.blocks == []
    assert model_forward(rng.standard_normal((7, 7, 6)), model).shape == (3,)


def test_model_forward_deterministic():
    rng = np.random.default_rng(0)
    model = Model.init(small_arch(), rng)
    x = rng.standard_normal((3, 7, 7, 6))
    assert model_forward(x, model).tobytes() == model_forward(x, model).tobytes()


def test_state_round_trip():
    a = Model.init(small_arch(), np.random.default_rng(0))
    b = Model.init(small_arch(), np.random.default_rng(1))
    b.load_state(a.state())
    x = np.random.default_rng(2).standard_normal((2, 7, 7, 6))
    assert model_logits(x, a).data.tobytes() == model_logits(x, b).data.tobytes()
    with pytest.raises(ValueError, match="missing"):
        b.load_state({})


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 2), st.sampled_from(list(Route)))
def test_token_shape_arithmetic(extra_b, extra_d, route):
    B, d = 4 + extra_b, 2 + extra_d
    arch = ArchConfig(n_classes=2, patch_size=B, pca_dim=d, embed_dim=2, state_size=2, route=route,
                      kernel=(3, 5, 5), conv_channels=2, head_hidden=3)
    model = Model.init(arch, np.random.default_rng(0))
    tokens = sstg_forward(np.zeros((1, B, B, d)), model.sstg)
    assert tokens.shape == (1, B - 4, B - 4, d - 2, 2)
    assert model_logits(np.zeros((1, B, B, d)), model).shape == (1, 2)
