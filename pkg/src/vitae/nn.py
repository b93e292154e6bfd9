"""Parameter containers and the basic layers cells are assembled from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, Tensor


class Module:
    """Holds parameters, buffers and child modules in registration order.

    Parameters are :class:`Tensor` attributes with ``requires_grad=True``;
    buffers are plain numpy arrays registered with :meth:`register_buffer`.
    Traversal order is deterministic, which fixes checkpoint entry order.
    """

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            value = ModuleList(value)
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = name
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in self._params:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for m in self.modules():
            for name in m._params:
                getattr(m, name).data = getattr(m, name).data.astype(dtype)
            for name in m._buffers:
                object.__setattr__(m, name, getattr(m, name).astype(dtype))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into matching parameters/buffers; return unmatched names."""
        own_params = dict(self.named_parameters())
        own_buffers = {}
        for m_name, m in self._named_modules():
            for b in m._buffers:
                own_buffers[m_name + b] = (m, b)
        unmatched = [k for k in state if k not in own_params and k not in own_buffers]
        missing = [k for k in list(own_params) + list(own_buffers) if k not in state]
        if strict and (unmatched or missing):
            raise KeyError(f"state mismatch: unexpected={unmatched} missing={missing}")
        for k, v in state.items():
            if k in own_params:
                p = own_params[k]
                if p.shape != v.shape:
                    raise ValueError(f"{k}: shape {v.shape} != {p.shape}")
                p.data = np.array(v, dtype=p.dtype)
            elif k in own_buffers:
                m, b = own_buffers[k]
                cur = getattr(m, b)
                object.__setattr__(m, b, np.array(v, dtype=cur.dtype).reshape(cur.shape))
        return unmatched + missing

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for cname, child in self._children.items():
            yield from child._named_modules(prefix + cname + ".")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self._children[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as ``[d_in, d_out]``; truncated-normal(0.02) init."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        w = np.clip(rng.standard_normal((d_in, d_out)), -2.0, 2.0) * 0.02
        self.weight = _param(w, dtype)
        self.bias = _param(np.zeros(d_out), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        cin: int,
        cout: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        dilation: int = 1,
        groups: int = 1,
        padding=None,
        dtype=np.float32,
    ):
        super().__init__()
        self.spec = ConvSpec.make(kernel, stride, dilation, padding, groups)
        self.spec.validate(cin, cout)
        self.cin, self.cout = cin, cout
        fan_in = (cin // groups) * kernel * kernel
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-math.sqrt(3.0) * bound, math.sqrt(3.0) * bound, (cout, cin // groups, kernel, kernel))
        self.weight = _param(w, dtype)
        self.bias = _param(rng.uniform(-bound, bound, cout), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.spec)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.weight = _param(np.ones(channels), dtype)
        self.bias = _param(np.zeros(channels), dtype)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.weight = _param(np.ones(d), dtype)
        self.bias = _param(np.zeros(d), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.weight, self.bias, self.eps)
