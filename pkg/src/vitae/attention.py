"""Exact multi-head self-attention and non-overlapping window attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import Linear, Module
from .tensor import Tensor


@dataclass
class AttentionStats:
    """Post-softmax attention weights of one layer.

    ``weights`` is ``[B, h, N, N]``. For window attention the batch axis holds
    ``B * n_windows`` entries and ``grid`` is the window extent, so distances
    are measured in window-local coordinates (translation does not change them).
    """

    weights: np.ndarray
    grid: tuple[int, int]
    stride_px: float
    has_class_token: bool = False
    name: str = ""


@dataclass(frozen=True)
class WindowSpec:
    window: tuple[int, int]
    grid: tuple[int, int]

    def __post_init__(self):
        (wh, ww), (hg, wg) = self.window, self.grid
        if wh < 1 or ww < 1 or hg % wh or wg % ww:
            raise ShapeError(
                f"token grid {hg}x{wg} is not divisible by window {wh}x{ww}; "
                "adjust the input size so every stage grid is a multiple of the window"
            )

    @property
    def count(self) -> int:
        return (self.grid[0] // self.window[0]) * (self.grid[1] // self.window[1])


class AttentionParams(Module):
    """Q/K/V projections ``d_in -> dim`` and output projection ``dim -> dim``.

    ``scale="head"`` divides logits by sqrt(dim/heads); ``scale="model"`` uses
    sqrt(dim), the literal single-formula reading.
    """

    def __init__(self, d_in: int, dim: int, heads: int, rng: np.random.Generator, scale: str = "head", dtype=np.float32):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ShapeError(f"embedding {dim} is not divisible by {heads} heads")
        if scale not in ("head", "model"):
            raise ValueError(f"unknown scale mode {scale!r}")
        self.d_in, self.dim, self.heads, self.scale_mode = d_in, dim, heads, scale
        self.q = Linear(d_in, dim, rng, dtype=dtype)
        self.k = Linear(d_in, dim, rng, dtype=dtype)
        self.v = Linear(d_in, dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)

    @property
    def scale(self) -> float:
        width = self.dim // self.heads if self.scale_mode == "head" else self.dim
        return 1.0 / math.sqrt(width)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def mhsa(tokens: Tensor, params: AttentionParams, capture_stats: bool = False):
    """Full self-attention over ``[B, N, d_in]``; returns ``(out [B, N, dim], weights or None)``."""
    if tokens.ndim != 3 or tokens.shape[-1] != params.d_in:
        raise ShapeError(f"mhsa expects [B, N, {params.d_in}], got {tokens.shape}")
    b, n, _ = tokens.shape
    h = params.heads
    q = _split_heads(params.q(tokens), h)
    k = _split_heads(params.k(tokens), h)
    v = _split_heads(params.v(tokens), h)
    logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * params.scale
    attn = T.softmax(logits, axis=-1)
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, params.dim))
    out = params.proj(out)
    return out, (attn.data.copy() if capture_stats else None)


def window_partition(x: Tensor, win: WindowSpec) -> Tensor:
    """``[B, Hg, Wg, D]`` -> ``[B * nW, wh * ww, D]``, windows in raster order."""
    b, hg, wg, d = x.shape
    wh, ww = win.window
    x = T.reshape(x, (b, hg // wh, wh, wg // ww, ww, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b * win.count, wh * ww, d))


def window_merge(x: Tensor, win: WindowSpec, batch: int) -> Tensor:
    (hg, wg), (wh, ww) = win.grid, win.window
    d = x.shape[-1]
    x = T.reshape(x, (batch, hg // wh, wg // ww, wh, ww, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (batch, hg, wg, d))


def window_attention(fmap_tokens: Tensor, params: AttentionParams, window, capture_stats: bool = False):
    """Self-attention restricted to non-overlapping windows of a token grid.

    ``fmap_tokens`` is ``[B, Hg, Wg, d_in]``. No shift and no relative
    position bias. Returns ``(out [B, Hg, Wg, dim], weights or None)``.
    """
    if fmap_tokens.ndim != 4:
        raise ShapeError(f"window_attention expects [B, Hg, Wg, D], got {fmap_tokens.shape}")
    b, hg, wg, _ = fmap_tokens.shape
    win = window if isinstance(window, WindowSpec) else WindowSpec(tuple(window), (hg, wg))
    if win.grid != (hg, wg):
        raise ShapeError(f"window spec grid {win.grid} != input grid {(hg, wg)}")
    parts = window_partition(fmap_tokens, win)
    out, weights = mhsa(parts, params, capture_stats)
    return window_merge(out, win, b), weights
