"""Network building blocks: SE, FFN, attention, stem, downsampling, and
the two residual block flavors (LS mixer for stages 1-3, multi-head
self-attention for stage 4).

Block wiring, with every branch vanishing when its parameters are zero:

    u = x + relu(bn(dw3x3(x)))
    m = mixer(se(u))              se gates channels, mixer = LS conv or MSA
    u = u + m
    y = u + pw2(relu(pw1(u)))     feed-forward, expansion 2

Parameters are allocated through a ``Registrar`` so every tensor has a
stable dotted name for serialization and optimizer bookkeeping.
Weights draw from Normal(0, 0.02) truncated at two standard deviations;
biases and BatchNorm shifts start at zero, BatchNorm scales at one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .lsconv import (
    ConvBn,
    LkpParams,
    LsConvConfig,
    Norm,
    build_lkp_params,
    conv_bn_act,
    lkp_forward,
    ska_forward,
)
from .tensor import (
    BnState,
    ConvParams,
    Tensor,
    batch_norm,
    conv2d,
    global_avg_pool,
    matmul,
    relu,
    reshape,
    resolve_dtype,
    same_padding,
    scale,
    sigmoid,
    softmax_lastdim,
    transpose,
)

INIT_STD = 0.02
SE_REDUCTION = 4
FFN_RATIO = 2


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within 2 std."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


class Registrar:
    """Allocates named parameter tensors and BatchNorm states.

    Draw order is the build order, so a fixed seed reproduces the exact
    same initialization bit for bit.
    """

    def __init__(self, seed: int, dtype="f32"):
        self.rng = np.random.default_rng(seed)
        self.dtype = resolve_dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.states: dict[str, BnState] = {}

    def _add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        self.params[name] = tensor
        return tensor

    def weight(self, name: str, shape) -> Tensor:
        data = trunc_normal(self.rng, shape).astype(self.dtype)
        return self._add(name, Tensor(data, requires_grad=True))

    def zeros(self, name: str, shape) -> Tensor:
        return self._add(name, Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True))

    def ones(self, name: str, shape) -> Tensor:
        return self._add(name, Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True))

    def norm(self, prefix: str, channels: int) -> Norm:
        scale_t = self.ones(f"{prefix}.scale", (channels,))
        shift_t = self.zeros(f"{prefix}.shift", (channels,))
        state = BnState.fresh(channels, self.dtype)
        if prefix in self.states:
            raise ConfigurationError(f"duplicate norm state {prefix!r}")
        self.states[prefix] = state
        return Norm(scale_t, shift_t, state)

    def conv(
        self,
        prefix: str,
        c_in: int,
        c_out: int,
        k: int,
        stride: int = 1,
        groups: int = 1,
        bias: bool = False,
        padding: Optional[int] = None,
    ) -> ConvParams:
        if c_in % groups:
            raise ConfigurationError(f"{prefix}: groups={groups} does not divide C_in={c_in}")
        kernel = self.weight(f"{prefix}.w", (c_out, c_in // groups, k, k))
        bias_t = self.zeros(f"{prefix}.b", (c_out,)) if bias else None
        pad = same_padding(k) if padding is None else padding
        return ConvParams(kernel, bias_t, stride=stride, padding=pad, groups=groups)

    def conv_bn(
        self,
        prefix: str,
        c_in: int,
        c_out: int,
        k: int,
        stride: int = 1,
        groups: int = 1,
        padding: Optional[int] = None,
        tag: str = "conv2d",
    ) -> ConvBn:
        conv = self.conv(prefix, c_in, c_out, k, stride, groups, False, padding)
        norm = self.norm(f"{prefix}.bn", c_out)
        return ConvBn(conv, norm, tag)


@dataclass
class SeParams:
    fc1: ConvParams
    fc2: ConvParams


def build_se(reg: Registrar, prefix: str, c: int) -> SeParams:
    hidden = max(1, c // SE_REDUCTION)
    fc1 = reg.conv(f"{prefix}.fc1", c, hidden, 1, bias=True)
    fc2 = reg.conv(f"{prefix}.fc2", hidden, c, 1, bias=True)
    return SeParams(fc1, fc2)


def se_forward(x: Tensor, p: SeParams) -> Tensor:
    """Squeeze-and-excitation gate: x * sigmoid(fc2(relu(fc1(gap(x)))))."""
    s = global_avg_pool(x)
    s = relu(conv2d(s, p.fc1, op="conv2d:pw"))
    s = sigmoid(conv2d(s, p.fc2, op="conv2d:pw"))
    return x * s


@dataclass
class FfnParams:
    pw1: ConvBn
    pw2: ConvBn


def build_ffn(reg: Registrar, prefix: str, c: int) -> FfnParams:
    hidden = FFN_RATIO * c
    pw1 = reg.conv_bn(f"{prefix}.pw1", c, hidden, 1, tag="conv2d:pw")
    pw2 = reg.conv_bn(f"{prefix}.pw2", hidden, c, 1, tag="conv2d:pw")
    return FfnParams(pw1, pw2)


def ffn_forward(x: Tensor, p: FfnParams, mode: str) -> Tensor:
    """Residual two-layer pointwise expansion: x + pw2(relu(pw1(x)))."""
    t = conv_bn_act(x, p.pw1, mode)
    t = conv_bn_act(t, p.pw2, mode, act=False)
    return x + t


def attn_dims(c: int) -> tuple[int, int]:
    """(heads, per-side width) for stage-4 attention at width C.

    Heads of size eight on a C/8-wide projection keep the stage-4
    parameter share compatible with the variant budgets.
    """
    if c % 8:
        raise ConfigurationError(f"attention channels must be divisible by 8, got {c}")
    heads = max(1, c // 64)
    width = c // 8
    if width % heads:
        raise ConfigurationError(f"attention width {width} not divisible by heads {heads}")
    return heads, width


@dataclass
class AttnParams:
    q: ConvParams
    k: ConvParams
    v: ConvParams
    proj: ConvBn
    heads: int
    width: int


def build_attn(reg: Registrar, prefix: str, c: int) -> AttnParams:
    heads, width = attn_dims(c)
    q = reg.conv(f"{prefix}.q", c, width, 1, bias=True)
    k = reg.conv(f"{prefix}.k", c, width, 1, bias=True)
    v = reg.conv(f"{prefix}.v", c, width, 1, bias=True)
    proj = reg.conv_bn(f"{prefix}.proj", width, c, 1, tag="conv2d:pw")
    return AttnParams(q, k, v, proj, heads, width)


def attention_forward(x: Tensor, p: AttnParams, mode: str) -> Tensor:
    """Softmax attention over all spatial tokens, no positional terms."""
    n, c, h, w = x.shape
    hw = h * w
    dh = p.width // p.heads
    q = reshape(conv2d(x, p.q, op="conv2d:pw"), (n, p.heads, dh, hw))
    k = reshape(conv2d(x, p.k, op="conv2d:pw"), (n, p.heads, dh, hw))
    v = reshape(conv2d(x, p.v, op="conv2d:pw"), (n, p.heads, dh, hw))
    scores = scale(matmul(transpose(q, (0, 1, 3, 2)), k), 1.0 / np.sqrt(dh))
    attn = softmax_lastdim(scores)
    mixed = matmul(attn, transpose(v, (0, 1, 3, 2)))
    mixed = reshape(transpose(mixed, (0, 1, 3, 2)), (n, p.width, h, w))
    return conv_bn_act(mixed, p.proj, mode)


@dataclass
class BlockFlags:
    disable_dw: bool = False
    disable_se: bool = False


@dataclass
class LsBlockParams:
    dw: Optional[ConvBn]
    se: Optional[SeParams]
    lkp: LkpParams
    mixer_norm: Norm
    ffn: FfnParams
    cfg: LsConvConfig


def build_ls_block(
    reg: Registrar, prefix: str, c: int, cfg: LsConvConfig, flags: BlockFlags
) -> LsBlockParams:
    dw = None if flags.disable_dw else reg.conv_bn(f"{prefix}.dw", c, c, 3, groups=c, tag="conv2d:dw")
    se = None if flags.disable_se else build_se(reg, f"{prefix}.se", c)
    lkp = build_lkp_params(reg, f"{prefix}.lkp", cfg)
    mixer_norm = reg.norm(f"{prefix}.mixer.bn", c)
    ffn = build_ffn(reg, f"{prefix}.ffn", c)
    return LsBlockParams(dw, se, lkp, mixer_norm, ffn, cfg)


def ls_block_forward(
    x: Tensor,
    p: LsBlockParams,
    mode: str,
    probe: Optional[dict] = None,
    name: str = "",
) -> Tensor:
    if p.dw is not None:
        x = x + conv_bn_act(x, p.dw, mode)
    s = se_forward(x, p.se) if p.se is not None else x
    wmap = lkp_forward(s, p.lkp, p.cfg, mode)
    if probe is not None:
        probe[f"{name}.agg_weights"] = wmap.data
    m = ska_forward(s, wmap, p.cfg)
    m = batch_norm(m, p.mixer_norm.scale, p.mixer_norm.shift, p.mixer_norm.state, mode)
    x = x + relu(m)
    return ffn_forward(x, p.ffn, mode)


@dataclass
class MsaBlockParams:
    dw: Optional[ConvBn]
    se: Optional[SeParams]
    attn: AttnParams
    ffn: FfnParams


def build_msa_block(reg: Registrar, prefix: str, c: int, flags: BlockFlags) -> MsaBlockParams:
    dw = None if flags.disable_dw else reg.conv_bn(f"{prefix}.dw", c, c, 3, groups=c, tag="conv2d:dw")
    se = None if flags.disable_se else build_se(reg, f"{prefix}.se", c)
    attn = build_attn(reg, f"{prefix}.attn", c)
    ffn = build_ffn(reg, f"{prefix}.ffn", c)
    return MsaBlockParams(dw, se, attn, ffn)


def msa_block_forward(x: Tensor, p: MsaBlockParams, mode: str) -> Tensor:
    if p.dw is not None:
        x = x + conv_bn_act(x, p.dw, mode)
    s = se_forward(x, p.se) if p.se is not None else x
    x = x + attention_forward(s, p.attn, mode)
    return ffn_forward(x, p.ffn, mode)


@dataclass
class StemParams:
    """Three stride-2 reductions; the last two are depthwise-separable."""

    conv1: ConvBn
    dw2: ConvBn
    pw2: ConvBn
    dw3: ConvBn
    pw3: ConvBn


def build_stem(reg: Registrar, prefix: str, c_in: int, ladder: tuple) -> StemParams:
    if len(ladder) != 3:
        raise ConfigurationError(f"stem ladder must have 3 entries, got {ladder}")
    c1, c2, c3 = ladder
    conv1 = reg.conv_bn(f"{prefix}.conv1", c_in, c1, 3, stride=2)
    dw2 = reg.conv_bn(f"{prefix}.dw2", c1, c1, 3, stride=2, groups=c1, tag="conv2d:dw")
    pw2 = reg.conv_bn(f"{prefix}.pw2", c1, c2, 1, tag="conv2d:pw")
    dw3 = reg.conv_bn(f"{prefix}.dw3", c2, c2, 3, stride=2, groups=c2, tag="conv2d:dw")
    pw3 = reg.conv_bn(f"{prefix}.pw3", c2, c3, 1, tag="conv2d:pw")
    return StemParams(conv1, dw2, pw2, dw3, pw3)


def stem_forward(x: Tensor, p: StemParams, mode: str) -> Tensor:
    """(N, C_in, H, W) -> (N, ladder[-1], H/8, W/8); extents must divide by 8."""
    n, c, h, w = x.shape
    if h % 8 or w % 8:
        raise ConfigurationError(f"stem input extents must be divisible by 8, got {h}x{w}")
    x = conv_bn_act(x, p.conv1, mode)
    x = conv_bn_act(x, p.dw2, mode)
    x = conv_bn_act(x, p.pw2, mode)
    x = conv_bn_act(x, p.dw3, mode)
    x = conv_bn_act(x, p.pw3, mode)
    return x


@dataclass
class DownsampleParams:
    dw: ConvBn
    pw: ConvBn
    stride: int


def build_downsample(reg: Registrar, prefix: str, c_in: int, c_out: int, stride: int = 2) -> DownsampleParams:
    if stride not in (1, 2):
        raise ConfigurationError(f"downsample stride must be 1 or 2, got {stride}")
    dw = reg.conv_bn(f"{prefix}.dw", c_in, c_in, 3, stride=stride, groups=c_in, tag="conv2d:dw")
    pw = reg.conv_bn(f"{prefix}.pw", c_in, c_out, 1, tag="conv2d:pw")
    return DownsampleParams(dw, pw, stride)


def downsample_forward(x: Tensor, p: DownsampleParams, mode: str) -> Tensor:
    """Depthwise 3x3 (stride 2) then pointwise channel change.

    Odd extents are legal; the convolution arithmetic rounds up, which
    is what lets 224-pixel inputs reach the 1/64-resolution stage.
    """
    x = conv_bn_act(x, p.dw, mode)
    return conv_bn_act(x, p.pw, mode)
