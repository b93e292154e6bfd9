"""Masked image modeling: token masking, masked-pixel loss, and 1x1 -> 3x3 kernel inflation.

The pretraining encoder is a patch-token stack of normal cells (no reduction
cells). Patches are embedded linearly, a random 75% are dropped, and the
remaining tokens run through normal cells whose PCMs use 1x1 kernels, so the
PCM acts on the kept tokens as an unordered set. A small transformer decoder
restores the full sequence with a learned mask token and predicts raw pixels.
After pretraining, :func:`inflate_kernels` zero-pads every PCM kernel to 3x3,
which leaves the encoder's function unchanged exactly.
"""

from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cells import NormalCell, TransformerBlock
from .config import ModelConfig, preset, validate
from .errors import ConfigError, ShapeError
from .model import sinusoid_table
from .nn import LayerNorm, Linear, Module
from .rng import make_rng
from .tensor import Tensor


@dataclass
class MaskPlan:
    """Per-sample sorted token indices; ``kept`` is ``[B, Nk]`` and ``masked`` ``[B, Nm]``."""

    kept: np.ndarray
    masked: np.ndarray
    ratio: float
    seed: int

    @property
    def n_tokens(self) -> int:
        return self.kept.shape[1] + self.masked.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """Boolean ``[B, N]``, True where the token is masked."""
        out = np.zeros((self.kept.shape[0], self.n_tokens), dtype=bool)
        np.put_along_axis(out, self.masked, True, axis=1)
        return out

    def restore_order(self) -> np.ndarray:
        """Indices that map ``concat(kept, masked)`` rows back to token order."""
        return np.argsort(np.concatenate([self.kept, self.masked], axis=1), axis=1, kind="stable")


def mask_count(n: int, ratio: float) -> int:
    return int(math.floor(ratio * n + 0.5))


def make_mask_plan(batch: int, n: int, ratio: float, seed: int) -> MaskPlan:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    n_mask = mask_count(n, ratio)
    order = np.argsort(make_rng(seed, 1).random((batch, n)), axis=1, kind="stable")
    masked = np.sort(order[:, :n_mask], axis=1)
    kept = np.sort(order[:, n_mask:], axis=1)
    return MaskPlan(kept, masked, float(ratio), int(seed))


def mask_tokens(tokens: Tensor, ratio: float, seed: int):
    """Drop ``round(ratio * N)`` tokens per sample, uniformly without replacement."""
    b, n, _ = tokens.shape
    plan = make_mask_plan(b, n, ratio, seed)
    return T.take_rows(tokens, plan.kept), plan


def mim_loss(pred_pixels: Tensor, target_pixels, plan: MaskPlan) -> Tensor:
    """Mean squared error over masked token positions only."""
    target = target_pixels.data if isinstance(target_pixels, Tensor) else np.asarray(target_pixels)
    if pred_pixels.shape != target.shape:
        raise ShapeError(f"prediction {pred_pixels.shape} != target {target.shape}")
    if plan.masked.size == 0:
        raise ValueError("mim_loss needs at least one masked token")
    if plan.n_tokens != pred_pixels.shape[1]:
        raise ShapeError(f"plan covers {plan.n_tokens} tokens, predictions have {pred_pixels.shape[1]}")
    picked = T.take_rows(pred_pixels, plan.masked)
    tgt = np.take_along_axis(target, plan.masked[..., None], axis=1).astype(pred_pixels.dtype)
    diff = picked - Tensor(tgt)
    return T.mean(diff * diff)


# ---------------------------------------------------------------------------
# Kernel inflation
# ---------------------------------------------------------------------------

PCM_WEIGHT = re.compile(r"(^|\.)pcm\.convs\.\d+\.weight$")


def inflate_kernels(state: dict[str, np.ndarray], targets=None) -> dict[str, np.ndarray]:
    """Zero-pad 1x1 conv weights to 3x3 with the original value at the center tap.

    ``targets`` defaults to every PCM convolution weight. Other entries are
    passed through as the same arrays.
    """
    names = [k for k in state if PCM_WEIGHT.search(k)] if targets is None else list(targets)
    if not names:
        raise ConfigError("no convolution weights to inflate")
    out = dict(state)
    for name in names:
        w = state[name]
        if w.ndim != 4 or w.shape[2:] != (1, 1):
            raise ShapeError(f"{name}: expected a 1x1 kernel, got shape {w.shape}")
        big = np.zeros(w.shape[:2] + (3, 3), dtype=w.dtype)
        big[:, :, 1, 1] = w[:, :, 0, 0]
        out[name] = big
    return out


# ---------------------------------------------------------------------------
# Encoder / decoder
# ---------------------------------------------------------------------------

def default_patch(input_size: int) -> int:
    return 16 if input_size >= 128 and input_size % 16 == 0 else 4


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, C, H, W]`` -> ``[B, (H/p)(W/p), C p p]`` in raster patch order."""
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch {patch}")
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


class PatchEncoder(Module):
    """Patch-token normal-cell stack built from the last stage of a config.

    Also serves as the finetuning classifier (layernorm, mean pool, linear
    head) so pretrained weights load with matching names.
    """

    def __init__(self, cfg: ModelConfig, patch: int | None = None, seed: int = 0, dtype=np.float32):
        super().__init__()
        cfg = validate(copy.deepcopy(cfg))
        s = cfg.stages[-1]
        if s.nc_count < 1:
            raise ConfigError("patch encoder needs at least one normal cell in the last stage")
        if s.nc_attention != "full":
            raise ConfigError("patch encoder uses full attention")
        patch = default_patch(cfg.input_size) if patch is None else patch
        if cfg.input_size % patch:
            raise ConfigError(f"input size {cfg.input_size} is not divisible by patch {patch}")
        object.__setattr__(self, "config", cfg)
        object.__setattr__(self, "patch", patch)
        object.__setattr__(self, "grid", (cfg.input_size // patch,) * 2)
        rng = make_rng(seed, 2)
        d = s.embed
        self.patch_embed = Linear(cfg.in_chans * patch * patch, d, rng, dtype=dtype)
        self.ncs = [
            NormalCell(d, s.nc_heads, rng, groups=s.nc_groups, ffn_ratio=cfg.ffn_ratio, pcm_kernel=cfg.pcm_kernel,
                       scale=cfg.attn_scale, activation=cfg.activation, stride_px=patch, dtype=dtype)
            for _ in range(s.nc_count)
        ]
        self.norm = LayerNorm(d, dtype=dtype)
        self.head = Linear(d, cfg.num_classes, rng, dtype=dtype)

    @property
    def dim(self) -> int:
        return self.patch_embed.d_out

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def dtype(self):
        return self.head.weight.dtype

    def encode(self, images, plan: MaskPlan | None = None, capture_stats: bool = False):
        """Embed patches, keep ``plan.kept`` rows if given, run the normal cells, layernorm."""
        x = images.data if isinstance(images, Tensor) else np.asarray(images)
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.in_chans, cfg.input_size, cfg.input_size):
            raise ShapeError(f"expected images [B, {cfg.in_chans}, {cfg.input_size}, {cfg.input_size}], got {x.shape}")
        t = self.patch_embed(Tensor(patchify(x.astype(self.dtype), self.patch)))
        t = t + Tensor(sinusoid_table(self.n_tokens, self.dim).astype(self.dtype))
        grid = self.grid
        if plan is not None:
            t = T.take_rows(t, plan.kept)
            grid = None
        stats = [] if capture_stats else None
        for j, nc in enumerate(self.ncs):
            t, st = nc(t, grid, False, capture_stats)
            if st is not None:
                st.name = f"nc{j + 1}"
                stats.append(st)
        return self.norm(t), stats

    def forward(self, images, capture_stats: bool = False):
        t, stats = self.encode(images, None, capture_stats)
        return self.head(T.mean(t, axis=1)), stats


class MIMDecoder(Module):
    def __init__(self, enc_dim: int, n_tokens: int, patch_pixels: int, seed: int = 0, depth: int = 2,
                 width: int | None = None, heads: int = 4, dtype=np.float32):
        super().__init__()
        width = min(128, enc_dim) if width is None else width
        if width > enc_dim:
            raise ConfigError(f"decoder width {width} exceeds encoder width {enc_dim}")
        rng = make_rng(seed, 3)
        self.n_tokens, self.width = n_tokens, width
        self.embed = Linear(enc_dim, width, rng, dtype=dtype)
        mask = np.clip(rng.standard_normal((1, 1, width)), -2.0, 2.0) * 0.02
        self.mask_token = Tensor(mask.astype(dtype), requires_grad=True)
        self.blocks = [TransformerBlock(width, heads, rng, dtype=dtype) for _ in range(depth)]
        self.norm = LayerNorm(width, dtype=dtype)
        self.pred = Linear(width, patch_pixels, rng, dtype=dtype)

    def forward(self, kept: Tensor, plan: MaskPlan) -> Tensor:
        """Insert mask tokens at masked positions and predict ``[B, N, patch_pixels]``."""
        b = kept.shape[0]
        x = self.embed(kept)
        parts = [x]
        if plan.masked.shape[1]:
            fill = Tensor(np.zeros((b, plan.masked.shape[1], self.width), dtype=x.dtype)) + self.mask_token
            parts.append(fill)
        x = T.take_rows(T.concat(parts, axis=1), plan.restore_order())
        x = x + Tensor(sinusoid_table(self.n_tokens, self.width).astype(x.dtype))
        for blk in self.blocks:
            x = blk(x)
        return self.pred(self.norm(x))


def build_mim(config: ModelConfig | str, patch: int | None = None, seed: int = 0, dtype=np.float32):
    """Encoder in 1x1-PCM mode plus a matching decoder."""
    cfg = preset(config) if isinstance(config, str) else config
    enc = PatchEncoder(cfg.copy(pcm_kernel=1), patch, seed, dtype)
    dec = MIMDecoder(enc.dim, enc.n_tokens, cfg.in_chans * enc.patch ** 2, seed, dtype=dtype)
    return enc, dec


def mim_forward(encoder: PatchEncoder, decoder: MIMDecoder, images, ratio: float, seed: int):
    """Return ``(loss, plan)`` for one masked-reconstruction pass."""
    if encoder.config.pcm_kernel != 1:
        raise ConfigError("pretraining needs an encoder built with pcm_kernel=1")
    x = images.data if isinstance(images, Tensor) else np.asarray(images)
    target = patchify(x.astype(encoder.dtype), encoder.patch)
    plan = make_mask_plan(x.shape[0], encoder.n_tokens, ratio, seed)
    kept, _ = encoder.encode(x, plan)
    pred = decoder(kept, plan)
    return mim_loss(pred, target, plan), plan


def pretrain_step(encoder: PatchEncoder, decoder: MIMDecoder, images, ratio: float, seed: int, optimizer=None) -> float:
    """One forward/backward pass; applies ``optimizer`` when given. Returns the loss value."""
    loss, _ = mim_forward(encoder, decoder, images, ratio, seed)
    T.backward(loss)
    if optimizer is not None:
        optimizer.step()
        optimizer.zero_grad()
    return float(loss.data)


def layer_decay_scales(model: Module, decay: float) -> dict[str, float]:
    """Per-parameter LR multipliers ``decay ** (depth_max - depth)`` for finetuning.

    Depth 0 is the token embedding, each cell adds one, and the head sits on top.
    """
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"layer decay must lie in (0, 1], got {decay}")
    names = [n for n, _ in model.named_parameters()]
    cells: list[str] = []
    depth_of: dict[str, int] = {}
    for n in names:
        m = re.match(r"(stages\.\d+\.rc|stages\.\d+\.ncs\.\d+|ncs\.\d+)\.", n)
        if m:
            if m.group(1) not in cells:
                cells.append(m.group(1))
            depth_of[n] = cells.index(m.group(1)) + 1
    top = len(cells) + 1
    scales = {}
    for n in names:
        if n in depth_of:
            d = depth_of[n]
        elif n.startswith(("patch_embed", "cls_token")):
            d = 0
        else:
            d = top
        scales[n] = decay ** (top - d)
    return scales


def inflate_checkpoint(ckpt):
    """Checkpoint-level inflation: kernels padded, PCM flag and recorded config set to 3."""
    from .checkpoint import Checkpoint

    if ckpt.pcm_kernel == 3:
        raise ShapeError("checkpoint already holds 3x3 PCM kernels")
    meta = copy.deepcopy(ckpt.metadata)
    if "config" in meta:
        meta["config"]["pcm_kernel"] = 3
    return Checkpoint(inflate_kernels(ckpt.tensors), dict(ckpt.kinds), meta, 3, ckpt.version)
