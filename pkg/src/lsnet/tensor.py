"""Rank-4 float tensors with reverse-mode automatic differentiation.

Numeric storage is a numpy array (float32 or float64). Every operation
exported here runs its forward pass eagerly, and, when any operand
requires gradients, records the operands plus a closure computing the
vector-Jacobian product. ``Tensor.backward`` replays those records in
reverse topological order and accumulates one gradient array per
reachable leaf, shape-equal to that leaf.

Accumulation order is fixed (plain loops, insertion-ordered graphs), so
repeated runs on identical inputs are bit-identical for a given dtype
and thread count. Every exported operation checks its output for
NaN/Inf and raises :class:`NumericError` when a non-finite value
appears; ``set_finite_checks(False)`` disables the scan for benchmarks.

Convolution uses symmetric zero padding and is implemented as a single
taped primitive (im2col plus a grouped matmul) with an analytic VJP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError

Array = np.ndarray

FLOAT_DTYPES = {"f32": np.float32, "f64": np.float64}

_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle post-op NaN/Inf scanning. Returns the previous setting."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


def _check_finite(data: Array, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(FLOAT_DTYPES[dtype])
        except KeyError:
            raise ConfigurationError(f"unknown dtype name {dtype!r}") from None
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigurationError(f"unsupported dtype {dt}")
    return dt


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff.

    ``grad`` stays ``None`` until a backward pass reaches this tensor.
    Only leaves created with ``requires_grad=True`` keep their gradient;
    interior nodes are transient.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        op: str = "leaf",
        _parents: tuple = (),
        _vjp: Optional[Callable[[Array], Sequence[Optional[Array]]]] = None,
    ):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[Array] = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.data.dtype})"

    # Arithmetic sugar used by block wiring.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def backward(self, seed: Optional[Array] = None) -> None:
        """Accumulate gradients of ``self`` into every reachable leaf.

        ``seed`` is the upstream gradient and must match this tensor's
        shape; it defaults to all ones. Existing ``grad`` buffers on
        leaves are added to, mirroring the usual accumulate-then-zero
        training loop.
        """
        if seed is None:
            seed_arr = np.ones_like(self.data)
        else:
            seed_arr = np.asarray(seed, dtype=self.data.dtype)
            if seed_arr.shape != self.data.shape:
                raise ConfigurationError(
                    f"seed gradient shape {seed_arr.shape} != output shape {self.data.shape}"
                )
        for leaf, grad in _backprop(self, seed_arr).items():
            if leaf.grad is None:
                leaf.grad = grad
            else:
                leaf.grad = leaf.grad + grad


def _topo_order(root: Tensor) -> list:
    """Iterative post-order DFS; returns nodes with parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _backprop(root: Tensor, seed: Array) -> dict:
    """Run the tape backward; returns ``{leaf Tensor: gradient array}``."""
    order = _topo_order(root)
    grads: dict[int, Array] = {id(root): seed}
    leaf_grads: dict[Tensor, Array] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        elif node.requires_grad:
            leaf_grads[node] = g
    return leaf_grads


def grad_map(output: Tensor, leaves: Iterable[Tensor], seed: Optional[Array] = None) -> dict:
    """Gradients of ``output`` w.r.t. ``leaves`` without touching ``.grad``.

    Raises ``LookupError`` if a requested leaf was never recorded on the
    tape reachable from ``output``.
    """
    if seed is None:
        seed = np.ones_like(output.data)
    found = _backprop(output, np.asarray(seed, dtype=output.data.dtype))
    result = {}
    for leaf in leaves:
        if leaf not in found:
            raise LookupError(f"tensor {leaf!r} is not reachable from the output")
        result[leaf] = found[leaf]
    return result


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _make(data: Array, parents: tuple, vjp, op: str) -> Tensor:
    """Wrap an op result, recording the tape entry only when needed."""
    _check_finite(data, op)
    if any(p.requires_grad or p._vjp is not None for p in parents):
        return Tensor(data, requires_grad=False, op=op, _parents=parents, _vjp=vjp)
    return Tensor(data, op=op)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum ``grad`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(out, (a, b), vjp, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return _make(out, (a,), vjp, "scale")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def vjp(g):
        return (g * (a.data > 0),)

    return _make(out, (a,), vjp, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign so exp never overflows.
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp, "sigmoid")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), vjp, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    return _make(out, (a,), vjp, "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the trailing two axes."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(out, (a, b), vjp, "matmul")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)

    return _make(out, (a,), vjp, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype, copy=False),)

    return _make(out, (a,), vjp, "mean")


def softmax_lastdim(a: Tensor) -> Tensor:
    """Numerically stable softmax over the final axis."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - inner) * out,)

    return _make(out, (a,), vjp, "softmax")


def global_avg_pool(a: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C, 1, 1) spatial mean."""
    if a.ndim != 4:
        raise ConfigurationError(f"global_avg_pool expects rank 4, got shape {a.shape}")
    n, c, h, w = a.shape
    if h < 1 or w < 1:
        raise ConfigurationError("global_avg_pool needs non-empty spatial extents")
    out = a.data.mean(axis=(2, 3), keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / (h * w), a.data.shape).astype(a.data.dtype, copy=False),)

    return _make(out, (a,), vjp, "gap")


@dataclass
class ConvParams:
    """Static convolution parameters.

    ``kernel`` is shaped (C_out, C_in / groups, kh, kw). Padding is
    symmetric zero padding. ``same_padding`` derives the stride-1
    size-preserving padding and therefore insists on odd kernels.
    """

    kernel: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ConfigurationError(f"kernel must be rank 4, got {self.kernel.shape}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ConfigurationError("stride >= 1, padding >= 0, groups >= 1 required")
        c_out = self.kernel.shape[0]
        if c_out % self.groups:
            raise ConfigurationError(f"groups={self.groups} does not divide C_out={c_out}")
        if self.bias is not None and self.bias.shape != (c_out,):
            raise ConfigurationError(f"bias shape {self.bias.shape} != ({c_out},)")

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]


def same_padding(kernel_size: int) -> int:
    if kernel_size % 2 == 0:
        raise ConfigurationError(f"'same' padding requires an odd kernel, got {kernel_size}")
    return (kernel_size - 1) // 2


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ConfigurationError(
            f"convolution output collapsed: size={size} kernel={kernel} stride={stride} padding={padding}"
        )
    return out


def _im2col(xp: Array, kh: int, kw: int, stride: int, ho: int, wo: int) -> Array:
    """(N, C, Hp, Wp) -> (N, C, kh, kw, ho, wo) patch gather."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride]
    return cols


def _col2im(dcols: Array, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> Array:
    """Adjoint of ``_im2col``: scatter-add patches back onto the padded image."""
    dxp = np.zeros(shape, dtype=dcols.dtype)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += dcols[:, :, u, v]
    return dxp


def conv2d(x: Tensor, p: ConvParams, op: str = "conv2d") -> Tensor:
    """Grouped 2D cross-correlation with zero padding.

    Handles pointwise (k=1), depthwise (groups == C), and general
    grouped kernels through one im2col path; 1x1 stride-1 convolutions
    skip the patch gather entirely.
    """
    if x.ndim != 4:
        raise ConfigurationError(f"conv2d expects rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    c_out, c_in_g, kh, kw = p.kernel.shape
    g = p.groups
    if c != c_in_g * g:
        raise ConfigurationError(
            f"input channels {c} != kernel in-channels {c_in_g} x groups {g}"
        )
    if c % g:
        raise ConfigurationError(f"groups={g} does not divide input channels {c}")
    ho = conv_out_size(h, kh, p.stride, p.padding)
    wo = conv_out_size(w, kw, p.stride, p.padding)
    cg_out = c_out // g

    xd = x.data
    if p.padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (p.padding, p.padding), (p.padding, p.padding)))
    else:
        xp = xd

    wm = p.kernel.data.reshape(g, cg_out, c_in_g * kh * kw)
    pointwise = kh == 1 and kw == 1 and p.stride == 1 and p.padding == 0
    if pointwise:
        cols = xd.reshape(n, g, c_in_g, h * w)
    else:
        patches = _im2col(xp, kh, kw, p.stride, ho, wo)
        cols = patches.reshape(n, g, c_in_g * kh * kw, ho * wo)
    y = np.matmul(wm, cols).reshape(n, c_out, ho, wo)
    if p.bias is not None:
        y = y + p.bias.data.reshape(1, c_out, 1, 1)

    def vjp(grad):
        gm = grad.reshape(n, g, cg_out, ho * wo)
        dw = np.matmul(gm, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(p.kernel.shape)
        dcols = np.matmul(np.swapaxes(wm, -1, -2), gm)
        if pointwise:
            dx = dcols.reshape(n, c, h, w)
        else:
            dpatches = dcols.reshape(n, c, kh, kw, ho, wo)
            dxp = _col2im(dpatches, xp.shape, kh, kw, p.stride, ho, wo)
            if p.padding:
                dx = dxp[:, :, p.padding : p.padding + h, p.padding : p.padding + w]
            else:
                dx = dxp
        if p.bias is not None:
            db = grad.sum(axis=(0, 2, 3))
            return dx, dw, db
        return dx, dw

    parents = (x, p.kernel) if p.bias is None else (x, p.kernel, p.bias)
    return _make(y, parents, vjp, op)


@dataclass
class BnState:
    """Running first and second moments; training updates them in place."""

    mean: Array
    var: Array

    @staticmethod
    def fresh(channels: int, dtype) -> "BnState":
        dt = resolve_dtype(dtype)
        return BnState(np.zeros(channels, dtype=dt), np.ones(channels, dtype=dt))


def batch_norm(
    x: Tensor,
    scale_t: Tensor,
    shift_t: Tensor,
    state: BnState,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
    update: Optional[bool] = None,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    ``train`` normalizes with batch statistics and, unless ``update`` is
    False, folds them into the running state with the given momentum
    (unbiased variance when more than one element contributes).
    ``infer`` normalizes with the running statistics and never mutates.
    """
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"batch_norm mode must be train or infer, got {mode!r}")
    if x.ndim != 4:
        raise ConfigurationError(f"batch_norm expects rank-4 input, got {x.shape}")
    c = x.shape[1]
    if scale_t.shape != (c,) or shift_t.shape != (c,):
        raise ConfigurationError(f"scale/shift must be shape ({c},)")
    if update is None:
        update = mode == "train"

    xd = x.data
    axes = (0, 2, 3)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    gamma = scale_t.data.reshape(1, c, 1, 1)
    beta = shift_t.data.reshape(1, c, 1, 1)

    if mode == "train":
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        x_hat = (xd - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        if update:
            var_run = var * (m / (m - 1)) if m > 1 else var
            state.mean *= 1.0 - momentum
            state.mean += momentum * mu
            state.var *= 1.0 - momentum
            state.var += momentum * var_run
    else:
        inv = 1.0 / np.sqrt(state.var + eps)
        x_hat = (xd - state.mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    y = gamma * x_hat + beta

    if mode == "train":

        def vjp(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * x_hat).sum(axis=axes)
            gi = gamma * inv.reshape(1, c, 1, 1)
            dx = gi * (
                g
                - (dbeta / m).reshape(1, c, 1, 1)
                - x_hat * (dgamma / m).reshape(1, c, 1, 1)
            )
            return dx, dgamma, dbeta

    else:

        def vjp(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * x_hat).sum(axis=axes)
            dx = g * gamma * inv.reshape(1, c, 1, 1)
            return dx, dgamma, dbeta

    return _make(y, (x, scale_t, shift_t), vjp, "batch_norm")


def cross_entropy_logits(logits: Tensor, labels: Array, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy of (N, K) logits against integer labels.

    With label smoothing ``eps`` the target distribution is
    ``(1 - eps) * onehot + eps / K``.
    """
    if logits.ndim != 2:
        raise ConfigurationError(f"cross_entropy expects (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ConfigurationError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigurationError("label id out of range")
    if not 0.0 <= smoothing < 1.0:
        raise ConfigurationError("smoothing must lie in [0, 1)")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    q = np.full((n, k), smoothing / k, dtype=z.dtype)
    q[np.arange(n), labels] += 1.0 - smoothing
    loss = np.asarray(-(q * logp).sum() / n, dtype=z.dtype)

    def vjp(g):
        p = np.exp(logp)
        return ((p - q) * (g / n),)

    return _make(loss, (logits,), vjp, "cross_entropy")


def count_ops(root: Tensor) -> dict:
    """Histogram of op tags in the recorded graph reachable from ``root``."""
    counts: dict[str, int] = {}
    for node in _topo_order(root):
        if node._vjp is not None:
            counts[node.op] = counts.get(node.op, 0) + 1
    return counts
