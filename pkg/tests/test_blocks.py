"""Network building blocks: registrar bookkeeping, gates, attention,
mixer blocks with their ablation switches, stem, and downsampling."""

import numpy as np
import pytest

from lsnet.blocks import (
    BlockFlags,
    Registrar,
    attention_forward,
    attn_dims,
    build_attn,
    build_downsample,
    build_ls_block,
    build_msa_block,
    build_se,
    build_stem,
    downsample_forward,
    ffn_forward,
    build_ffn,
    ls_block_forward,
    msa_block_forward,
    se_forward,
    stem_forward,
    trunc_normal,
)
from lsnet.errors import ConfigurationError
from lsnet.lsconv import LsConvConfig
from lsnet.tensor import Tensor, sum_all


def zero_params(reg):
    for t in reg.params.values():
        t.data[...] = 0.0


def test_trunc_normal_bounds(rng):
    x = trunc_normal(rng, (10_000,), std=0.02)
    assert np.all(np.abs(x) <= 0.04)
    assert abs(x.std() - 0.02) < 0.003


def test_registrar_bookkeeping():
    reg = Registrar(seed=0)
    reg.conv_bn("a", 4, 8, 3)
    assert set(reg.params) == {"a.w", "a.bn.scale", "a.bn.shift"}
    assert set(reg.states) == {"a.bn"}
    with pytest.raises(ConfigurationError):
        reg.weight("a.w", (1,))
    with pytest.raises(ConfigurationError):
        reg.norm("a.bn", 8)
    with pytest.raises(ConfigurationError):
        reg.conv("g", 6, 6, 3, groups=4)


def test_registrar_seed_reproducibility():
    a = Registrar(seed=5).weight("w", (3, 3))
    b = Registrar(seed=5).weight("w", (3, 3))
    c = Registrar(seed=6).weight("w", (3, 3))
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_se_magnitude_bound_and_shape(rng):
    reg = Registrar(seed=0)
    p = build_se(reg, "se", 16)
    assert p.fc1.out_channels == 4
    x = rng.standard_normal((2, 16, 5, 5)).astype(np.float32)
    y = se_forward(Tensor(x), p)
    assert y.shape == x.shape
    assert np.all(np.abs(y.data) <= np.abs(x) + 1e-7)
    # the gate is one scalar per (image, channel)
    ratio = np.where(x != 0, y.data / x, np.nan)
    per_channel = np.nanstd(ratio, axis=(2, 3))
    assert np.nanmax(per_channel) < 1e-6


def test_ffn_structure(rng):
    reg = Registrar(seed=0)
    p = build_ffn(reg, "ffn", 8)
    assert p.pw1.conv.out_channels == 16
    x = rng.standard_normal((2, 8, 4, 4)).astype(np.float32)
    y = ffn_forward(Tensor(x), p, "train")
    assert y.shape == x.shape
    zero_params(reg)
    y0 = ffn_forward(Tensor(x), p, "train")
    assert np.array_equal(y0.data, x)


def test_attn_dims():
    assert attn_dims(64) == (1, 8)
    assert attn_dims(128) == (2, 16)
    assert attn_dims(384) == (6, 48)
    with pytest.raises(ConfigurationError):
        attn_dims(12)


def test_attention_token_permutation_equivariance(rng):
    reg = Registrar(seed=0)
    p = build_attn(reg, "attn", 64)
    x = rng.standard_normal((1, 64, 4, 4)).astype(np.float32)
    perm = rng.permutation(16)
    xp = x.reshape(1, 64, 16)[:, :, perm].reshape(1, 64, 4, 4)
    y = attention_forward(Tensor(x), p, "infer").data.reshape(1, 64, 16)
    yp = attention_forward(Tensor(xp), p, "infer").data.reshape(1, 64, 16)
    assert np.allclose(y[:, :, perm], yp, atol=1e-5)


def test_attention_gradients_reach_all_params(rng):
    reg = Registrar(seed=0)
    p = build_attn(reg, "attn", 64)
    x = Tensor(rng.standard_normal((2, 64, 3, 3)).astype(np.float32))
    sum_all(attention_forward(x, p, "train")).backward()
    for name, t in reg.params.items():
        assert t.grad is not None, name


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_ls_block_zeroed_params_is_identity(rng, mode):
    reg = Registrar(seed=0)
    cfg = LsConvConfig(channels=16)
    p = build_ls_block(reg, "b", 16, cfg, BlockFlags())
    zero_params(reg)
    x = rng.standard_normal((2, 16, 6, 6)).astype(np.float32)
    y = ls_block_forward(Tensor(x), p, mode)
    assert np.array_equal(y.data, x)


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_msa_block_zeroed_params_is_identity(rng, mode):
    reg = Registrar(seed=0)
    p = build_msa_block(reg, "b", 64, BlockFlags())
    zero_params(reg)
    x = rng.standard_normal((2, 64, 3, 3)).astype(np.float32)
    y = msa_block_forward(Tensor(x), p, mode)
    assert np.array_equal(y.data, x)


def test_block_ablation_flags(rng):
    cfg = LsConvConfig(channels=16)
    x = Tensor(np.asarray(rng.standard_normal((1, 16, 5, 5)), np.float32))
    reg = Registrar(seed=0)
    p = build_ls_block(reg, "b", 16, cfg, BlockFlags(disable_dw=True, disable_se=True))
    assert p.dw is None and p.se is None
    assert not any(n.startswith(("b.dw.", "b.se.")) for n in reg.params)
    assert ls_block_forward(x, p, "train").shape == x.shape

    full = build_ls_block(Registrar(seed=0), "b", 16, cfg, BlockFlags())
    assert full.dw is not None and full.se is not None


def test_ls_block_probe_captures_weight_map(rng):
    reg = Registrar(seed=0)
    cfg = LsConvConfig(channels=16)
    p = build_ls_block(reg, "b", 16, cfg, BlockFlags())
    probe = {}
    x = Tensor(rng.standard_normal((2, 16, 6, 6)).astype(np.float32))
    ls_block_forward(x, p, "infer", probe=probe, name="s2.b0")
    assert list(probe) == ["s2.b0.agg_weights"]
    assert probe["s2.b0.agg_weights"].shape == (2, cfg.weight_width, 6, 6)


def test_stem_shapes_and_validation(rng):
    reg = Registrar(seed=0)
    p = build_stem(reg, "stem", 3, (8, 16, 32))
    x = Tensor(rng.standard_normal((2, 3, 32, 48)).astype(np.float32))
    y = stem_forward(x, p, "train")
    assert y.shape == (2, 32, 4, 6)
    with pytest.raises(ConfigurationError):
        stem_forward(Tensor(np.zeros((1, 3, 30, 32), np.float32)), p, "train")
    with pytest.raises(ConfigurationError):
        build_stem(Registrar(seed=0), "stem", 3, (8, 16))


def test_downsample_ceil_halving(rng):
    reg = Registrar(seed=0)
    p = build_downsample(reg, "ds", 8, 12)
    x = Tensor(rng.standard_normal((1, 8, 7, 9)).astype(np.float32))
    y = downsample_forward(x, p, "train")
    assert y.shape == (1, 12, 4, 5)
    y1 = downsample_forward(Tensor(np.zeros((1, 8, 1, 1), np.float32)), p, "train")
    assert y1.shape == (1, 12, 1, 1)
    with pytest.raises(ConfigurationError):
        build_downsample(Registrar(seed=0), "ds", 8, 12, stride=3)
