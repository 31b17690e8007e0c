"""The large-small convolution operator.

A large-kernel perception branch (LKP) looks at a wide neighborhood and
emits, for every spatial position, one aggregation weight per group and
per small-kernel tap. Small-kernel aggregation (SKA) then convolves
each channel with the dynamic kernel of its group:

    y[n, c, i, j] = sum_{u, v} w[n, g(c), u, v, i, j] * x[n, c, i+u-r, j+v-r]

with zero padding, r = (k_small - 1) // 2, and g(c) = c // (C / G).
The weight map is produced flat as (N, D, H, W) with D = G * k_small^2
and reinterpreted row-major: d = g * k_small^2 + u * k_small + v.

``ska_forward`` is the vectorized taped primitive used by models;
``ska_forward_naive`` is the loop-by-loop reference it is tested
against. ``ls_conv_macs`` itemizes multiply-accumulate counts and
cross-checks them against the closed form

    (H * W * C / 4) * (3 C + 2 k_large^2 + (2 G + 4) k_small^2).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .tensor import (
    BnState,
    ConvParams,
    Tensor,
    batch_norm,
    conv2d,
    relu,
    _make,
)

Array = np.ndarray


@dataclass(frozen=True)
class LsConvConfig:
    """Shape-level description of one LS convolution.

    ``groups`` defaults to ``channels // 8`` (group width 8). The LKP
    branch halves the channel count internally, so ``channels`` must be
    even; both kernels must be odd and the large one at least as wide
    as the small one. ``lkp_dw`` disables the large depthwise layer for
    the receptive-field ablation when False.
    """

    channels: int
    k_large: int = 7
    k_small: int = 3
    groups: Optional[int] = None
    lkp_dw: bool = True

    def __post_init__(self):
        if self.groups is None:
            if self.channels % 8:
                raise ConfigurationError(
                    f"default grouping needs channels divisible by 8, got {self.channels}"
                )
            object.__setattr__(self, "groups", self.channels // 8)
        c, g = self.channels, self.groups
        if c <= 0 or c % 2:
            raise ConfigurationError(f"channels must be positive and even, got {c}")
        if g < 1 or c % g:
            raise ConfigurationError(f"groups={g} must divide channels={c}")
        for k in (self.k_large, self.k_small):
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"kernels must be odd and positive, got {k}")
        if self.k_large < self.k_small:
            raise ConfigurationError(
                f"k_large={self.k_large} must be >= k_small={self.k_small}"
            )

    @property
    def weight_width(self) -> int:
        """Channels of the generated weight map: D = G * k_small^2."""
        return self.groups * self.k_small * self.k_small

    @property
    def group_size(self) -> int:
        return self.channels // self.groups


@dataclass
class Norm:
    """BatchNorm parameters plus running state."""

    scale: Tensor
    shift: Tensor
    state: BnState


@dataclass
class ConvBn:
    """A convolution followed by BatchNorm (ReLU applied by the caller)."""

    conv: ConvParams
    norm: Norm
    tag: str = "conv2d"


def conv_bn_act(x: Tensor, cb: ConvBn, mode: str, act: bool = True) -> Tensor:
    y = conv2d(x, cb.conv, op=cb.tag)
    y = batch_norm(y, cb.norm.scale, cb.norm.shift, cb.norm.state, mode)
    return relu(y) if act else y


@dataclass
class LkpParams:
    """Large-kernel perception: PW reduce, DW large, PW mid, PW expand.

    The first three convolutions carry BatchNorm + ReLU; the final
    pointwise expansion is raw (bias only) because its outputs are the
    aggregation weights themselves. ``dw`` is None when the large
    depthwise path is ablated to identity.
    """

    reduce: ConvBn
    dw: Optional[ConvBn]
    mid: ConvBn
    expand: ConvParams


def build_lkp_params(reg, prefix: str, cfg: LsConvConfig) -> LkpParams:
    """Allocate LKP parameters through a registrar (see ``blocks.Registrar``)."""
    c = cfg.channels
    half = c // 2
    reduce = reg.conv_bn(f"{prefix}.reduce", c, half, 1, tag="conv2d:pw")
    dw = None
    if cfg.lkp_dw:
        dw = reg.conv_bn(
            f"{prefix}.dw", half, half, cfg.k_large, groups=half, tag="conv2d:dw-large"
        )
    mid = reg.conv_bn(f"{prefix}.mid", half, half, 1, tag="conv2d:pw")
    expand = reg.conv(f"{prefix}.expand", half, cfg.weight_width, 1, bias=True)
    return LkpParams(reduce, dw, mid, expand)


def lkp_forward(x: Tensor, p: LkpParams, cfg: LsConvConfig, mode: str = "train") -> Tensor:
    """Generate the flat (N, D, H, W) aggregation-weight map."""
    if x.ndim != 4 or x.shape[1] != cfg.channels:
        raise ConfigurationError(f"lkp input {x.shape} does not match channels={cfg.channels}")
    t = conv_bn_act(x, p.reduce, mode)
    if p.dw is not None:
        t = conv_bn_act(t, p.dw, mode)
    t = conv_bn_act(t, p.mid, mode)
    return conv2d(t, p.expand, op="conv2d:pw")


def weight_view(w: Array, cfg: LsConvConfig) -> Array:
    """Reinterpret a flat weight map as (N, G, k, k, H, W), copy-free."""
    n, d, h, wd = w.shape
    if d != cfg.weight_width:
        raise ConfigurationError(f"weight width {d} != G*k^2 = {cfg.weight_width}")
    k = cfg.k_small
    return w.reshape(n, cfg.groups, k, k, h, wd)


def ska_forward(x: Tensor, w: Tensor, cfg: LsConvConfig) -> Tensor:
    """Small-kernel aggregation (vectorized, differentiable in x and w)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigurationError("ska expects rank-4 inputs")
    n, c, h, wid = x.shape
    if c != cfg.channels:
        raise ConfigurationError(f"input channels {c} != cfg.channels {cfg.channels}")
    if w.shape[0] != n or w.shape[2:] != (h, wid):
        raise ConfigurationError(f"weight map {w.shape} does not match input {x.shape}")
    k = cfg.k_small
    g = cfg.groups
    cg = cfg.group_size
    r = (k - 1) // 2

    wg = weight_view(w.data, cfg)
    xd = x.data
    if r:
        xp = np.pad(xd, ((0, 0), (0, 0), (r, r), (r, r)))
    else:
        xp = xd
    xpg = xp.reshape(n, g, cg, h + 2 * r, wid + 2 * r)

    y = np.zeros((n, g, cg, h, wid), dtype=xd.dtype)
    for u in range(k):
        for v in range(k):
            y += wg[:, :, u, v][:, :, None] * xpg[:, :, :, u : u + h, v : v + wid]
    out = y.reshape(n, c, h, wid)

    def vjp(grad):
        gg = grad.reshape(n, g, cg, h, wid)
        dw = np.empty_like(wg)
        dxp = np.zeros_like(xpg)
        for u in range(k):
            for v in range(k):
                patch = xpg[:, :, :, u : u + h, v : v + wid]
                dw[:, :, u, v] = (gg * patch).sum(axis=2)
                dxp[:, :, :, u : u + h, v : v + wid] += wg[:, :, u, v][:, :, None] * gg
        dx = dxp.reshape(n, c, h + 2 * r, wid + 2 * r)
        if r:
            dx = dx[:, :, r : r + h, r : r + wid]
        return dx, dw.reshape(w.data.shape)

    return _make(out, (x, w), vjp, "ska")


def ska_forward_naive(x, w, cfg: LsConvConfig) -> Array:
    """Reference aggregation: six explicit loops with zero-padding reads.

    Accepts tensors or arrays, returns a plain array. Deliberately
    unvectorized; this is the semantic oracle the fast path is checked
    against.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    wd = w.data if isinstance(w, Tensor) else np.asarray(w)
    n, c, h, wid = xd.shape
    k = cfg.k_small
    r = (k - 1) // 2
    cg = cfg.group_size
    out = np.zeros_like(xd)
    for ni in range(n):
        for ci in range(c):
            gi = ci // cg
            for i in range(h):
                for j in range(wid):
                    acc = 0.0
                    for u in range(k):
                        ii = i + u - r
                        if ii < 0 or ii >= h:
                            continue
                        for v in range(k):
                            jj = j + v - r
                            if jj < 0 or jj >= wid:
                                continue
                            d = gi * k * k + u * k + v
                            acc += wd[ni, d, i, j] * xd[ni, ci, ii, jj]
                    out[ni, ci, i, j] = acc
    return out


def ls_conv_forward(x: Tensor, p: LkpParams, cfg: LsConvConfig, mode: str = "train") -> Tensor:
    """Full LS convolution: aggregation weights from LKP, applied by SKA."""
    return ska_forward(x, lkp_forward(x, p, cfg, mode), cfg)


@dataclass(frozen=True)
class MacEntry:
    name: str
    macs: int
    params: int


@dataclass
class MacReport:
    """Itemized multiply-accumulate and parameter tally.

    MACs follow the usual convolution convention (output elements times
    kernel taps); normalization, activations, residual adds, and pooling
    count zero. ``closed_form`` is set on LS-convolution reports and is
    asserted equal to the itemized kernel total.
    """

    entries: list = field(default_factory=list)
    closed_form: Optional[int] = None

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    def add(self, name: str, macs: int, params: int) -> None:
        self.entries.append(MacEntry(name, int(macs), int(params)))

    def extend(self, other: "MacReport", prefix: str = "") -> None:
        for e in other.entries:
            self.entries.append(MacEntry(prefix + e.name, e.macs, e.params))

    def table(self) -> str:
        lines = [f"{'op':40s} {'MACs':>14s} {'params':>12s}"]
        for e in self.entries:
            lines.append(f"{e.name:40s} {e.macs:14d} {e.params:12d}")
        lines.append(f"{'total':40s} {self.total_macs:14d} {self.total_params:12d}")
        return "\n".join(lines)


def ls_conv_closed_form_macs(cfg: LsConvConfig, h: int, w: int) -> int:
    """(HWC/4) * (3C + 2*KL^2 + (2G + 4)*KS^2), evaluated in exact integers."""
    c, g = cfg.channels, cfg.groups
    kl2 = cfg.k_large * cfg.k_large
    ks2 = cfg.k_small * cfg.k_small
    numerator = h * w * c * (3 * c + 2 * kl2 + (2 * g + 4) * ks2)
    if numerator % 4:
        raise ArithmeticError("closed form is not integral; channels must be even")
    return numerator // 4


def ls_conv_macs(cfg: LsConvConfig, h: int, w: int) -> MacReport:
    """Per-layer MAC/parameter itemization for one LS convolution.

    The kernel-MAC total is checked against the closed form whenever the
    large depthwise path is present (the closed form assumes it).
    """
    if h < 1 or w < 1:
        raise ConfigurationError("spatial extents must be positive")
    c, g = cfg.channels, cfg.groups
    half = c // 2
    d = cfg.weight_width
    hw = h * w
    rep = MacReport()
    rep.add("lkp.pw_reduce", hw * half * c, half * c)
    rep.add("lkp.pw_reduce.bn", 0, 2 * half)
    if cfg.lkp_dw:
        rep.add("lkp.dw_large", hw * half * cfg.k_large * cfg.k_large, half * cfg.k_large * cfg.k_large)
        rep.add("lkp.dw_large.bn", 0, 2 * half)
    rep.add("lkp.pw_mid", hw * half * half, half * half)
    rep.add("lkp.pw_mid.bn", 0, 2 * half)
    rep.add("lkp.pw_expand", hw * d * half, d * half)
    rep.add("lkp.pw_expand.bias", 0, d)
    rep.add("ska", hw * c * cfg.k_small * cfg.k_small, 0)
    if cfg.lkp_dw:
        rep.closed_form = ls_conv_closed_form_macs(cfg, h, w)
        kernel_total = sum(e.macs for e in rep.entries)
        if kernel_total != rep.closed_form:
            raise ArithmeticError(
                f"itemized MACs {kernel_total} != closed form {rep.closed_form}"
            )
    return rep
