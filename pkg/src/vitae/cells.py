"""Reduction and normal cells.

A reduction cell (RC) downsamples a feature map ``[B, C, H, W]`` by ``r``:

    tokens = Img2Seq(PRM(f))                   # dilated strided conv pyramid
    fused  = MHSA(LN(tokens)) + Img2Seq(PCM(f))  # early fusion with the conv branch
    out    = Seq2Img(fused + FFN(LN(fused)))

A normal cell (NC) keeps the token count:

    t_g  = t + MHSA(LN(t))
    t_l  = Img2Seq(PCM(Seq2Img(spatial tokens)))   # class-token row left at zero
    out  = (t_g + t_l) + FFN(LN(t_g + t_l))
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import AttentionParams, AttentionStats, WindowSpec, mhsa, window_attention
from .errors import ConfigError, ShapeError
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor

PCM_STRIDES = {1: (1, 1, 1), 2: (2, 1, 1), 4: (2, 2, 1)}


class PRM(Module):
    """Pyramid reduction: one strided conv per dilation rate, concatenated on channels."""

    def __init__(self, cin: int, branch_out: int, dilations, kernel: int, stride: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if not dilations:
            raise ConfigError("PRM needs a non-empty dilation set")
        self.dilations = sorted(int(d) for d in dilations)
        self.stride = stride
        self.branch_out = branch_out
        self.branches = [Conv2d(cin, branch_out, kernel, rng, stride=stride, dilation=d, dtype=dtype)
                         for d in self.dilations]

    @property
    def out_channels(self) -> int:
        return self.branch_out * len(self.dilations)

    def forward(self, f: Tensor) -> Tensor:
        h, w = f.shape[2:]
        if h % self.stride or w % self.stride:
            raise ShapeError(f"PRM input {h}x{w} is not divisible by reduction {self.stride}")
        return T.concat([conv(f) for conv in self.branches], axis=1)


class PCM(Module):
    """Three stacked conv/BN layers with activations between them (none after the last)."""

    def __init__(self, channels, strides, rng: np.random.Generator, groups: int = 1, kernel: int = 3,
                 activation: str = "gelu", dtype=np.float32):
        super().__init__()
        if len(strides) != 3 or len(channels) != 4:
            raise ConfigError("PCM has exactly three convolution layers")
        self.strides = tuple(int(s) for s in strides)
        self.kernel = kernel
        self.activation = activation
        chans = tuple(int(c) for c in channels)
        self.convs = [Conv2d(chans[i], chans[i + 1], kernel, rng, stride=self.strides[i], groups=groups, dtype=dtype)
                      for i in range(3)]
        self.bns = [BatchNorm2d(chans[i + 1], dtype=dtype) for i in range(3)]

    @property
    def reduction(self) -> int:
        return int(np.prod(self.strides))

    def forward(self, f: Tensor) -> Tensor:
        x = f
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            x = bn(conv(x))
            if i < 2:
                x = T.activation(self.activation, x)
        return x


class FFN(Module):
    """Pre-norm residual MLP: ``t + W2 act(W1 LN(t))``."""

    def __init__(self, dim: int, ratio: float, rng: np.random.Generator, activation: str = "gelu", dtype=np.float32):
        super().__init__()
        self.hidden = int(round(dim * ratio))
        self.activation = activation
        self.norm = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, self.hidden, rng, dtype=dtype)
        self.fc2 = Linear(self.hidden, dim, rng, dtype=dtype)

    def forward(self, t: Tensor) -> Tensor:
        if t.shape[-1] != self.fc1.d_in:
            raise ShapeError(f"FFN width {self.fc1.d_in} != token width {t.shape[-1]}")
        return t + self.fc2(T.activation(self.activation, self.fc1(self.norm(t))))


def _attend(tokens: Tensor, attn: AttentionParams, kind: str, grid, window: int, capture: bool):
    """Run full or window attention over ``[B, N, D]`` tokens laid out on ``grid``."""
    if kind == "window":
        b, n, d = tokens.shape
        win = WindowSpec((window, window), tuple(grid))
        out, w = window_attention(T.reshape(tokens, (b, grid[0], grid[1], d)), attn, win, capture)
        return T.reshape(out, (b, n, attn.dim)), w, (window, window)
    out, w = mhsa(tokens, attn, capture)
    return out, w, tuple(grid) if grid is not None else None


class ReductionCell(Module):
    def __init__(self, cin: int, dim: int, dilations, kernel: int, reduction: int, rng: np.random.Generator,
                 attention: str = "full", heads: int = 1, window: int = 7, ffn_ratio: float = 4.0,
                 pcm_hidden: int | None = None, pcm_kernel: int = 3, scale: str = "head",
                 activation: str = "gelu", stride_px: float = 1.0, dtype=np.float32):
        super().__init__()
        if reduction not in PCM_STRIDES:
            raise ConfigError(f"unsupported reduction ratio {reduction}")
        self.dim, self.reduction, self.attention, self.window = dim, reduction, attention, window
        self.stride_px = stride_px
        branch = dim // len(dilations)
        self.prm = PRM(cin, branch, dilations, kernel, reduction, rng, dtype=dtype)
        d_in = self.prm.out_channels
        self.norm = LayerNorm(d_in, dtype=dtype)
        self.attn = AttentionParams(d_in, dim, heads, rng, scale=scale, dtype=dtype)
        hidden = pcm_hidden or dim
        self.pcm = PCM((cin, hidden, hidden, dim), PCM_STRIDES[reduction], rng, kernel=pcm_kernel,
                       activation=activation, dtype=dtype)
        self.ffn = FFN(dim, ffn_ratio, rng, activation, dtype=dtype)

    def forward(self, f: Tensor, capture_stats: bool = False):
        ms = self.prm(f)
        grid = ms.shape[2:]
        tokens = T.img2seq(ms)
        kind = "window" if self.attention == "window" else "full"
        g, w, stat_grid = _attend(self.norm(tokens), self.attn, kind, grid, self.window, capture_stats)
        local = self.pcm(f)
        if local.shape[2:] != grid:
            raise ShapeError(f"PCM output {local.shape[2:]} != PRM output {grid}")
        out = self.ffn(g + T.img2seq(local))
        stats = None
        if capture_stats:
            stats = AttentionStats(w, stat_grid, self.stride_px, False)
        return T.seq2img(out, grid), stats


class NormalCell(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, attention: str = "full", window: int = 7,
                 groups: int = 1, ffn_ratio: float = 4.0, pcm_kernel: int = 3, scale: str = "head",
                 activation: str = "gelu", stride_px: float = 1.0, dtype=np.float32):
        super().__init__()
        self.dim, self.attention, self.window, self.stride_px = dim, attention, window, stride_px
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = AttentionParams(dim, dim, heads, rng, scale=scale, dtype=dtype)
        hidden = int(round(dim * ffn_ratio))
        if hidden % groups:
            raise ConfigError(f"PCM hidden width {hidden} not divisible by {groups} groups")
        self.pcm = PCM((dim, hidden, dim, dim), PCM_STRIDES[1], rng, groups=groups, kernel=pcm_kernel,
                       activation=activation, dtype=dtype)
        self.ffn = FFN(dim, ffn_ratio, rng, activation, dtype=dtype)

    def forward(self, t: Tensor, grid=None, has_class_token: bool = False, capture_stats: bool = False):
        """``grid=None`` treats the spatial tokens as an unordered set (1x1 PCM only)."""
        b, n, d = t.shape
        n_sp = n - 1 if has_class_token else n
        if grid is not None and grid[0] * grid[1] != n_sp:
            raise ShapeError(f"{n_sp} spatial tokens do not fill a {grid[0]}x{grid[1]} grid")
        if grid is None and self.pcm.kernel != 1:
            raise ShapeError("tokens without a spatial grid need a 1x1 PCM")
        if has_class_token and self.attention == "window":
            raise ConfigError("window attention does not take a class token")
        kind = "window" if self.attention == "window" else "full"
        a, w, stat_grid = _attend(self.norm1(t), self.attn, kind, grid, self.window, capture_stats)
        t_g = t + a
        spatial = t[:, 1:, :] if has_class_token else t
        img = T.seq2img(spatial, grid if grid is not None else (n_sp, 1))
        t_l = T.img2seq(self.pcm(img))
        if has_class_token:
            t_l = T.concat([Tensor(np.zeros((b, 1, d), dtype=t.dtype)), t_l], axis=1)
        out = self.ffn(t_g + t_l)
        stats = None
        if capture_stats:
            stats = AttentionStats(w, stat_grid, self.stride_px, has_class_token)
        return out, stats


class TransformerBlock(Module):
    """Plain pre-norm block (attention + FFN), used by the MIM decoder and as a reference."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, ffn_ratio: float = 4.0,
                 scale: str = "head", activation: str = "gelu", dtype=np.float32):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = AttentionParams(dim, dim, heads, rng, scale=scale, dtype=dtype)
        self.ffn = FFN(dim, ffn_ratio, rng, activation, dtype=dtype)

    def forward(self, t: Tensor) -> Tensor:
        a, _ = mhsa(self.norm1(t), self.attn)
        return self.ffn(t + a)


# Functional entry points mirroring the module forwards.

def prm_forward(f: Tensor, p: PRM) -> Tensor:
    return p(f)


def pcm_forward(f: Tensor, p: PCM) -> Tensor:
    return p(f)


def ffn_block(t: Tensor, p: FFN) -> Tensor:
    return p(t)


def reduction_cell_forward(f: Tensor, p: ReductionCell) -> Tensor:
    return p(f)[0]


def normal_cell_forward(t: Tensor, p: NormalCell, has_class_token: bool, grid) -> Tensor:
    return p(t, grid, has_class_token)[0]
