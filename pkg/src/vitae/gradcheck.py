"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import GradientError
from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst_index: tuple[int, ...] | None = None

    def __bool__(self) -> bool:
        return self.passed


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    tol: float = 1e-4,
    eps: float = 1e-5,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f`` at ``x`` against central differences.

    The relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    Run in float64; float32 does not leave enough headroom for differencing.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x0.size > 10_000:
        raise ValueError(f"grad_check input too large to difference ({x0.size} elements)")
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if not isinstance(out, Tensor) or out.ndim != 0:
        raise GradientError("grad_check needs a scalar-valued function")
    tape = backward(out, retain_grads=False)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    for node in tape.nodes:
        if node.is_leaf:
            node.grad = None

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(x0.copy())).item()
            flat[i] = orig - eps
            fm = f(Tensor(x0.copy())).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    max_rel = float(rel.reshape(-1)[worst]) if rel.size else 0.0
    return GradCheckReport(
        max_rel_err=max_rel,
        passed=bool(max_rel < tol),
        n_checked=int(rel.size),
        worst_index=tuple(int(i) for i in np.unravel_index(worst, x0.shape)) if rel.size else None,
    )


def _owner(module, name: str):
    *path, attr = name.split(".")
    m = module
    for part in path:
        m = m._children[part]
    return m, attr


def grad_check_params(module, loss_fn: Callable[[], Tensor], tol: float = 1e-4, eps: float = 1e-5,
                      skip: Callable[[str], bool] | None = None) -> dict[str, GradCheckReport]:
    """Run :func:`grad_check` against each parameter of ``module`` in turn.

    ``loss_fn`` recomputes the scalar loss from scratch. The parameter under
    test is swapped for the probe tensor and restored afterwards.
    """
    reports = {}
    for name, p in list(module.named_parameters()):
        if skip is not None and skip(name):
            continue
        owner, attr = _owner(module, name)

        def f(t, owner=owner, attr=attr):
            object.__setattr__(owner, attr, t)
            return loss_fn()

        try:
            reports[name] = grad_check(f, p.data, tol, eps)
        finally:
            object.__setattr__(owner, attr, p)
    return reports


# ---------------------------------------------------------------------------
# Registered cases (shared by the test suite and the command line)
# ---------------------------------------------------------------------------

def _weighted(out: Tensor, rng) -> Tensor:
    """Random-weighted sum: keeps every output element in play without symmetric cancellation."""
    from . import tensor as T

    w = Tensor(rng.standard_normal(out.shape))
    return T.sum(out * w)


def op_cases(seed: int) -> dict[str, list[tuple[str, Callable, np.ndarray]]]:
    """``{op: [(argument label, f, x0), ...]}`` for every differentiable primitive."""
    from . import tensor as T
    from .rng import make_rng
    from .tensor import ConvSpec

    rng = make_rng(seed, 99)
    r = lambda *s: rng.standard_normal(s)
    cases: dict[str, list] = {}

    def add(op, label, f, x):
        cases.setdefault(op, []).append((label, f, x))

    a, b = r(3, 4), r(4)
    add("add", "a", lambda t: _weighted(t + Tensor(b), make_rng(seed, 1)), a)
    add("add", "b (broadcast)", lambda t: _weighted(Tensor(a) + t, make_rng(seed, 1)), b)
    add("sub", "b (broadcast)", lambda t: _weighted(Tensor(a) - t, make_rng(seed, 1)), b)
    add("mul", "a", lambda t: _weighted(t * Tensor(a[::-1].copy()), make_rng(seed, 1)), a)
    add("mul", "b (broadcast)", lambda t: _weighted(Tensor(a) * t, make_rng(seed, 1)), b)
    add("scale", "x", lambda t: _weighted(-(t * 2.5) / 4.0, make_rng(seed, 1)), a)
    m1, m2 = r(2, 3, 4), r(2, 4, 5)
    add("matmul", "a", lambda t: _weighted(T.matmul(t, Tensor(m2)), make_rng(seed, 1)), m1)
    add("matmul", "b", lambda t: _weighted(T.matmul(Tensor(m1), t), make_rng(seed, 1)), m2)
    x, w, bias = r(2, 3, 4), r(4, 5), r(5)
    add("linear", "x", lambda t: _weighted(T.linear(t, Tensor(w), Tensor(bias)), make_rng(seed, 1)), x)
    add("linear", "weight", lambda t: _weighted(T.linear(Tensor(x), t, Tensor(bias)), make_rng(seed, 1)), w)
    add("linear", "bias", lambda t: _weighted(T.linear(Tensor(x), Tensor(w), t), make_rng(seed, 1)), bias)
    add("reshape", "x", lambda t: _weighted(T.reshape(t, (4, 6)), make_rng(seed, 1)), x)
    add("transpose", "x", lambda t: _weighted(T.transpose(t, (2, 0, 1)), make_rng(seed, 1)), x)
    add("getitem", "slice", lambda t: _weighted(t[:, 1:, ::2], make_rng(seed, 1)), x)
    add("getitem", "fancy", lambda t: _weighted(t[np.array([0, 1, 0])], make_rng(seed, 1)), x)
    add("concat", "x", lambda t: _weighted(T.concat([t, Tensor(x), t], axis=1), make_rng(seed, 1)), x)
    idx = np.array([[2, 0, 2], [1, 1, 0]])
    add("take_rows", "x", lambda t: _weighted(T.take_rows(t, idx), make_rng(seed, 1)), x)
    img = r(2, 3, 2, 3)
    add("img2seq", "x", lambda t: _weighted(T.img2seq(t), make_rng(seed, 1)), img)
    add("seq2img", "x", lambda t: _weighted(T.seq2img(t, (2, 2)), make_rng(seed, 1)), r(2, 4, 3))
    add("sum", "x", lambda t: _weighted(T.sum(t, axis=1), make_rng(seed, 1)), x)
    add("mean", "x", lambda t: _weighted(T.mean(t, axis=(0, 2)), make_rng(seed, 1)), x)
    add("softmax", "x", lambda t: _weighted(T.softmax(t * 2.0, axis=-1), make_rng(seed, 1)), x)
    add("gelu", "x", lambda t: _weighted(T.gelu(t * 2.0), make_rng(seed, 1)), x)
    g, be = 1.0 + 0.1 * r(4), r(4)
    add("layernorm", "x", lambda t: _weighted(T.layernorm(t, Tensor(g), Tensor(be)), make_rng(seed, 1)), x)
    add("layernorm", "gamma", lambda t: _weighted(T.layernorm(Tensor(x), t, Tensor(be)), make_rng(seed, 1)), g)
    add("layernorm", "beta", lambda t: _weighted(T.layernorm(Tensor(x), Tensor(g), t), make_rng(seed, 1)), be)
    fm, gc, bc = r(3, 2, 3, 3), 1.0 + 0.1 * r(2), r(2)

    def bn(t_x, t_g, t_b, training):
        return T.batchnorm2d(t_x, t_g, t_b, np.zeros(2), np.ones(2), training, 0.1, 1e-5)

    add("batchnorm2d", "x (train)", lambda t: _weighted(bn(t, Tensor(gc), Tensor(bc), True), make_rng(seed, 1)), fm)
    add("batchnorm2d", "gamma (train)", lambda t: _weighted(bn(Tensor(fm), t, Tensor(bc), True), make_rng(seed, 1)), gc)
    add("batchnorm2d", "beta (train)", lambda t: _weighted(bn(Tensor(fm), Tensor(gc), t, True), make_rng(seed, 1)), bc)
    add("batchnorm2d", "x (eval)", lambda t: _weighted(bn(t, Tensor(gc), Tensor(bc), False), make_rng(seed, 1)), fm)
    cx, cw, cb = r(2, 4, 5, 5), r(6, 2, 3, 3), r(6)
    spec = ConvSpec.make(3, stride=2, dilation=2, groups=2)
    add("conv2d", "x", lambda t: _weighted(T.conv2d(t, Tensor(cw), Tensor(cb), spec), make_rng(seed, 1)), cx)
    add("conv2d", "weight", lambda t: _weighted(T.conv2d(Tensor(cx), t, Tensor(cb), spec), make_rng(seed, 1)), cw)
    add("conv2d", "bias", lambda t: _weighted(T.conv2d(Tensor(cx), Tensor(cw), t, spec), make_rng(seed, 1)), cb)
    labels = np.array([0, 3, 1])
    add("cross_entropy", "logits", lambda t: T.cross_entropy(t, labels), r(3, 4))
    return cases


OPS = tuple(op_cases(0))


def zero_gradient_param(name: str) -> bool:
    """Parameters whose true gradient is identically zero.

    A conv bias feeding training-mode batchnorm is cancelled by the mean
    subtraction, and a key bias shifts every logit of a query row by the same
    amount, which softmax ignores. Differencing them only measures rounding
    noise, so the cell checks skip them (a separate test asserts the zeros).
    """
    parts = name.split(".")
    return parts[-1] == "bias" and ("convs" in parts or parts[-2] == "k")


def cell_case(kind: str, seed: int):
    """Tiny float64 cell plus input and a loss closure, for end-to-end checks."""
    from . import tensor as T
    from .cells import NormalCell, ReductionCell
    from .rng import make_rng

    rng = make_rng(seed, 98)
    if kind == "rc":
        cell = ReductionCell(3, 8, [1, 2], 3, 2, rng, heads=2, ffn_ratio=2.0, pcm_hidden=4, dtype=np.float64)
        x0 = rng.standard_normal((2, 3, 4, 4))
        run = lambda t: cell(t)[0]
    elif kind == "nc":
        cell = NormalCell(8, 2, rng, groups=2, ffn_ratio=2.0, dtype=np.float64)
        x0 = rng.standard_normal((2, 5, 8))
        run = lambda t: cell(t, (2, 2), True)[0]
    else:
        raise ValueError(f"unknown cell kind {kind!r}")
    # Spread the parameters so no activation sits in a flat, tiny-gradient regime.
    for p in cell.parameters():
        if p.ndim >= 2:
            p.data = p.data * (0.3 / np.std(p.data))
    loss = lambda t: _weighted(run(t), make_rng(seed, 1))
    return cell, x0, loss


def check_cell(kind: str, seed: int, tol: float = 1e-4) -> dict[str, GradCheckReport]:
    cell, x0, loss = cell_case(kind, seed)
    out = {"input": grad_check(loss, x0, tol)}
    out.update(grad_check_params(cell, lambda: loss(Tensor(x0)), tol, skip=zero_gradient_param))
    return out
