"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient (and recording is enabled), the result remembers its parents and a
closure mapping the output gradient to the input gradients. :func:`backward`
walks that DAG in reverse topological order.

Layout conventions: spatial tensors are ``[B, C, H, W]`` and token tensors are
``[B, N, D]``, both row-major.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import GradientError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "ConvSpec",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "count_macs",
    "elementwise",
    "add",
    "sub",
    "mul",
    "sum",
    "mean",
    "matmul",
    "linear",
    "reshape",
    "transpose",
    "concat",
    "take_rows",
    "softmax",
    "gelu",
    "activation",
    "layernorm",
    "batchnorm2d",
    "conv2d",
    "cross_entropy",
    "img2seq",
    "seq2img",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, optimizer updates)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _MacCounter:
    def __init__(self) -> None:
        self.total = 0
        self.by_kind: dict[str, int] = {}

    def add(self, kind: str, n: int) -> None:
        self.total += n
        self.by_kind[kind] = self.by_kind.get(kind, 0) + n


@contextlib.contextmanager
def count_macs() -> Iterator[_MacCounter]:
    """Tally multiply-accumulates executed by matmul, linear and conv2d."""
    stack = getattr(_state, "counters", None)
    if stack is None:
        stack = _state.counters = []
    counter = _MacCounter()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _tally(kind: str, n: int) -> None:
    stack = getattr(_state, "counters", None)
    if stack:
        for c in stack:
            c.add(kind, int(n))


class Tensor:
    """An n-dimensional array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def backward(self, retain_grads: bool = True) -> "Tape":
        return backward(self, retain_grads=retain_grads)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return _sum(self, axis, keepdims) * (1.0 / n)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _result(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Topologically ordered nodes of one backward pass and their gradients."""

    nodes: list[Tensor]
    grads: dict[int, np.ndarray]

    def grad(self, t: Tensor) -> np.ndarray | None:
        return self.grads.get(id(t))


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_grads: bool = True) -> Tape:
    """Backpropagate from a scalar ``loss``; populate ``.grad`` on leaves.

    Running backward twice on one graph, or into a leaf whose ``.grad`` is
    still set from an earlier pass, raises :class:`GradientError`.
    """
    if loss.ndim != 0:
        raise GradientError(f"backward needs a rank-0 loss, got shape {loss.shape}")
    if loss._consumed:
        raise GradientError("backward already ran on this graph; rebuild it with a new forward pass")
    if not loss.requires_grad:
        raise GradientError("loss is detached from the tape (no input requires grad)")
    order = _topo_order(loss)
    leaves = [n for n in order if n._backward is None]
    for leaf in leaves:
        if leaf.grad is not None:
            raise GradientError("leaf already holds a gradient; call zero_grad() before another backward")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    kept: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        if retain_grads or node._backward is None:
            kept[id(node)] = g
        if node._backward is None:
            node.grad = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise GradientError(f"{node.op}: gradient shape {pg.shape} != value shape {p.data.shape}")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True
    return Tape(nodes=order, grads=kept)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def elementwise(op: str, a, b) -> Tensor:
    """``op`` in {add, sub, mul} with numpy broadcasting of ``b`` against ``a``."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {b.shape} against {a.shape}") from None
    ad, bd = a.data, b.data
    if op == "add":
        data = ad + bd

        def bw(g):
            return _unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)

    elif op == "sub":
        data = ad - bd

        def bw(g):
            return _unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)

    elif op == "mul":
        data = ad * bd

        def bw(g):
            ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
            gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
            return ga, gb

    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    assert data.shape == out_shape
    return _result(data, (a, b), bw, op)


def add(a, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    return elementwise("mul", a, b)


def _sum(x: Tensor, axis, keepdims: bool) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(data, (x,), bw, "sum")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return x.sum(axis, keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return x.mean(axis, keepdims)


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., M, K] @ [..., K, P]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    data = ad @ bd
    _tally("matmul", data.size * ad.shape[-1])

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is ``[D_in, D_out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    _tally("linear", out.size * x.shape[-1])
    data = out.reshape(*lead, weight.shape[1])

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, parents, bw, "linear")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    src = x.shape
    return _result(data, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))
    return _result(data, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def _getitem(x: Tensor, index) -> Tensor:
    data = np.array(x.data[index])
    shape = x.shape

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in idx)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(data, (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _result(data, tuple(tensors), bw, "concat")


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-sample row gather: ``x[b, index[b, k], :]`` for ``x`` of shape ``[B, N, D]``."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"take_rows: index shape {index.shape} incompatible with {x.shape}")
    data = np.take_along_axis(x.data, index[:, :, None], axis=1)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        b = np.arange(shape[0])[:, None]
        np.add.at(full, (b, index), g)
        return (full,)

    return _result(data, (x,), bw, "take_rows")


def img2seq(x: Tensor) -> Tensor:
    """``[B, C, H, W]`` -> ``[B, H*W, C]`` in raster order."""
    b, c, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def seq2img(t: Tensor, grid: tuple[int, int]) -> Tensor:
    """``[B, H*W, C]`` -> ``[B, C, H, W]``; inverse of :func:`img2seq`."""
    b, n, c = t.shape
    h, w = grid
    if h * w != n:
        raise ShapeError(f"seq2img: {n} tokens do not fill a {h}x{w} grid")
    return transpose(reshape(t, (b, h, w, c)), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_forward(x: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    return x * (ndtr(x) if cdf is None else cdf)


def _gelu_derivative(x: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    return (ndtr(x) if cdf is None else cdf) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = ndtr(xd)
    data = _gelu_forward(xd, cdf).astype(xd.dtype, copy=False)
    return _result(data, (x,), lambda g: (g * _gelu_derivative(xd, cdf).astype(xd.dtype, copy=False),), "gelu")


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def _normalize_backward(g_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    m1 = g_hat.mean(axis=axes, keepdims=True)
    m2 = (g_hat * x_hat).mean(axis=axes, keepdims=True)
    return inv_std * (g_hat - m1 - x_hat * m2)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each token over its last axis, then apply ``gamma``/``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: feature width {d} != affine width {gamma.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = xc * inv_std
    data = x_hat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gx = _normalize_backward(g * gamma.data, x_hat, inv_std, -1) if x.requires_grad else None
        gg = (g * x_hat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _result(data, (x, gamma, beta), bw, "layernorm")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over ``(B, H, W)`` per channel.

    In training mode the running statistics are updated in place (unbiased
    variance, as is customary); evaluation uses them directly.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm2d: input {x.shape} does not match {gamma.shape[0]} channels")
    c = x.shape[1]
    g_ = gamma.data.reshape(1, c, 1, 1)
    b_ = beta.data.reshape(1, c, 1, 1)
    axes = (0, 2, 3)
    xd = x.data
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ShapeError("batchnorm2d: training mode needs at least two values per channel")
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = xc * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c) * (count / (count - 1))
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(xd.dtype)
        x_hat = (xd - running_mean.reshape(1, c, 1, 1)) * inv_std
    data = (x_hat * g_ + b_).astype(xd.dtype, copy=False)

    def bw(g):
        gx = None
        if x.requires_grad:
            g_hat = g * g_
            gx = _normalize_backward(g_hat, x_hat, inv_std, axes) if training else g_hat * inv_std
        gg = (g * x_hat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        return gx, gg, gb

    return _result(data, (x, gamma, beta), bw, "batchnorm2d")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1

    @classmethod
    def make(cls, kernel, stride=1, dilation=1, padding=None, groups=1) -> "ConvSpec":
        """Build a spec; ``padding=None`` selects "same" padding ``d*(k-1)/2``."""
        k, d = _pair(kernel), _pair(dilation)
        if padding is None:
            if k[0] % 2 == 0 or k[1] % 2 == 0:
                raise ShapeError(f"same padding needs odd kernels, got {k}")
            padding = (d[0] * (k[0] - 1) // 2, d[1] * (k[1] - 1) // 2)
        return cls(k, _pair(stride), d, _pair(padding), int(groups))

    def output_extent(self, h: int, w: int) -> tuple[int, int]:
        out = []
        for n, k, s, d, p in zip((h, w), self.kernel, self.stride, self.dilation, self.padding):
            o = (n + 2 * p - d * (k - 1) - 1) // s + 1
            if o < 1:
                raise ShapeError(f"conv output extent {o} < 1 for input {n}, kernel {k}, dilation {d}")
            out.append(o)
        return out[0], out[1]

    def validate(self, cin: int, cout: int) -> None:
        if self.groups < 1 or cin % self.groups or cout % self.groups:
            raise ShapeError(f"channels {cin}->{cout} not divisible by groups={self.groups}")


def _tap_slices(spec: ConvSpec, oh: int, ow: int):
    (kh, kw), (sh, sw), (dh, dw) = spec.kernel, spec.stride, spec.dilation
    for i in range(kh):
        for j in range(kw):
            yield i * kw + j, (
                slice(i * dh, i * dh + sh * (oh - 1) + 1, sh),
                slice(j * dw, j * dw + sw * (ow - 1) + 1, sw),
            )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Grouped, strided, dilated 2-D convolution via im2col.

    ``weight`` is ``[C_out, C_in/groups, kh, kw]``. Kernel taps whose weights
    are all zero are skipped in the forward product, so a zero-padded 1x1
    kernel reproduces the 1x1 result bit for bit.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B, C, H, W], got {x.shape}")
    b, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if (kh, kw) != spec.kernel:
        raise ShapeError(f"weight kernel {(kh, kw)} != spec kernel {spec.kernel}")
    spec.validate(cin, cout)
    g = spec.groups
    if cg != cin // g:
        raise ShapeError(f"weight expects {cg * g} input channels, input has {cin}")
    oh, ow = spec.output_extent(h, w)
    ph, pw = spec.padding
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    taps = list(_tap_slices(spec, oh, ow))
    ntap = kh * kw
    og = cout // g
    wd = weight.data.reshape(g, og, cg, ntap)
    active = [t for t, _ in taps if np.any(wd[..., t])] or [ntap // 2]

    def im2col(tap_ids):
        cols = np.empty((cin, len(tap_ids), b, oh, ow), dtype=xd.dtype)
        for n, t in enumerate(tap_ids):
            sh_, sw_ = taps[t][1]
            cols[:, n] = xp[:, :, sh_, sw_].transpose(1, 0, 2, 3)
        return cols.reshape(g, cg * len(tap_ids), b * oh * ow)

    cols = im2col(active)
    wmat = np.ascontiguousarray(wd[..., active]).reshape(g, og, cg * len(active))
    out = np.matmul(wmat, cols)  # [g, og, B*oh*ow]
    _tally("conv2d", b * cout * oh * ow * cg * ntap)
    out = out.reshape(cout, b, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    data = np.ascontiguousarray(out)

    def bw(gout):
        gm = gout.transpose(1, 0, 2, 3).reshape(g, og, b * oh * ow)
        gx = gw = gb = None
        if weight.requires_grad:
            full = cols if len(active) == ntap else im2col(range(ntap))
            gw = np.matmul(gm, full.transpose(0, 2, 1)).reshape(g, og, cg, ntap).reshape(cout, cg, kh, kw)
        if x.requires_grad:
            gcols = np.matmul(wmat.transpose(0, 2, 1), gm).reshape(cin, len(active), b, oh, ow)
            gxp = np.zeros_like(xp)
            for n, t in enumerate(active):
                sh_, sw_ = taps[t][1]
                gxp[:, :, sh_, sw_] += gcols[:, n].transpose(1, 0, 2, 3)
            gx = gxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else gxp
            gx = np.ascontiguousarray(gx)
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    rows = np.arange(n)
    data = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _result(data, (logits,), bw, "cross_entropy")
