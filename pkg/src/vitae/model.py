"""Isotropic (ViTAE) and multi-stage (ViTAEv2) classifiers plus analytic cost accounting."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cells import NormalCell, ReductionCell
from .config import ModelConfig, preset, validate
from .errors import ShapeError
from .nn import LayerNorm, Linear, Module, ModuleList
from .rng import make_rng
from .tensor import Tensor


def sinusoid_table(n: int, d: int) -> np.ndarray:
    """1-D position table ``[n, d]``: sin on even columns, cos on odd, base 10000."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d // 2 + d % 2, dtype=np.float64)
    angle = pos / np.power(10000.0, 2.0 * i / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table


class Stage(Module):
    def __init__(self, rc: ReductionCell, ncs: list[NormalCell]):
        super().__init__()
        self.rc = rc
        self.ncs = ModuleList(ncs)


class ViTAE(Module):
    """Stacked reduction/normal cells with a class-token (isotropic) or pooled (multistage) head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        cfg = validate(copy.deepcopy(cfg))
        object.__setattr__(self, "config", cfg)
        rng = make_rng(seed, 0)
        cin, stride = cfg.in_chans, 1
        stages = []
        for i, s in enumerate(cfg.stages):
            stride *= s.reduction
            rc = ReductionCell(
                cin, s.embed, s.dilations, s.kernel, s.reduction, rng,
                attention=s.rc_attention, heads=s.rc_heads, window=s.window, ffn_ratio=cfg.ffn_ratio,
                pcm_hidden=s.embed if i == 0 else cin, pcm_kernel=cfg.pcm_kernel, scale=cfg.attn_scale,
                activation=cfg.activation, stride_px=stride, dtype=dtype,
            )
            ncs = [
                NormalCell(
                    s.embed, s.nc_heads, rng, attention=s.nc_attention, window=s.window, groups=s.nc_groups,
                    ffn_ratio=cfg.ffn_ratio, pcm_kernel=cfg.pcm_kernel, scale=cfg.attn_scale,
                    activation=cfg.activation, stride_px=stride, dtype=dtype,
                )
                for _ in range(s.nc_count)
            ]
            stages.append(Stage(rc, ncs))
            cin = s.embed
        self.stages = ModuleList(stages)
        d = cfg.stages[-1].embed
        if cfg.class_token:
            cls = np.clip(rng.standard_normal((1, 1, d)), -2.0, 2.0) * 0.02
            self.cls_token = Tensor(cls.astype(dtype), requires_grad=True)
        self.norm = LayerNorm(d, dtype=dtype)
        self.head = Linear(d, cfg.num_classes, rng, dtype=dtype)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def forward(self, images: Tensor, capture_stats: bool = False):
        """Return ``(logits [B, num_classes], stats)``; ``stats`` is a list when captured, else None."""
        cfg = self.config
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        if images.ndim != 4 or images.shape[1] != cfg.in_chans or images.shape[2:] != (cfg.input_size,) * 2:
            raise ShapeError(
                f"expected images [B, {cfg.in_chans}, {cfg.input_size}, {cfg.input_size}], got {images.shape}"
            )
        stats = [] if capture_stats else None

        def keep(st, name):
            if st is not None:
                st.name = name
                stats.append(st)

        f = images
        if cfg.class_token:
            for i, stage in enumerate(self.stages):
                f, st = stage.rc(f, capture_stats)
                keep(st, f"stage{i + 1}.rc")
            b, d = f.shape[0], f.shape[1]
            grid = f.shape[2:]
            tokens = T.img2seq(f)
            cls = Tensor(np.zeros((b, 1, d), dtype=f.dtype)) + self.cls_token
            t = T.concat([cls, tokens], axis=1)
            t = t + Tensor(sinusoid_table(t.shape[1], d).astype(f.dtype))
            for j, nc in enumerate(self.stages[-1].ncs):
                t, st = nc(t, grid, True, capture_stats)
                keep(st, f"stage{len(self.stages)}.nc{j + 1}")
            pooled = self.norm(t[:, 0, :])
        else:
            for i, stage in enumerate(self.stages):
                f, st = stage.rc(f, capture_stats)
                keep(st, f"stage{i + 1}.rc")
                grid = f.shape[2:]
                t = T.img2seq(f)
                for j, nc in enumerate(stage.ncs):
                    t, st = nc(t, grid, False, capture_stats)
                    keep(st, f"stage{i + 1}.nc{j + 1}")
                f = T.seq2img(t, grid)
            pooled = T.mean(self.norm(T.img2seq(f)), axis=1)
        return self.head(pooled), stats


def build(config: ModelConfig | str, seed: int = 0, dtype=np.float32) -> ViTAE:
    cfg = preset(config) if isinstance(config, str) else config
    return ViTAE(cfg, seed=seed, dtype=dtype)


def forward_classify(m: ViTAE, images, capture_stats: bool = False):
    return m(images, capture_stats)


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------

@dataclass
class ParamCount:
    total: int
    breakdown: dict[str, int]


def count_params(m: Module) -> ParamCount:
    """Element count of every learnable tensor, grouped by cell."""
    breakdown: dict[str, int] = {}
    total = 0
    for name, p in m.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:4]) if parts[0] == "stages" and parts[2] == "ncs" else ".".join(parts[:3]) if parts[0] == "stages" else parts[0]
        breakdown[key] = breakdown.get(key, 0) + p.size
        total += p.size
    return ParamCount(total, breakdown)


@dataclass
class FlopReport:
    """Multiply-accumulates for one image.

    ``macs`` counts what the implementation executes. ``macs_table`` costs
    Performer-designated reduction cells as linear attention (random-feature
    count D/2), the convention the reference table uses; ``caveat`` names the
    affected cells when the two differ.
    """

    macs: int
    macs_table: int
    per_stage: list[int]
    caveat: str = ""
    by_kind: dict[str, int] = field(default_factory=dict)

    @property
    def gmacs(self) -> float:
        return self.macs / 1e9

    @property
    def gmacs_table(self) -> float:
        return self.macs_table / 1e9


def _conv_macs(conv, h: int, w: int) -> tuple[int, int, int]:
    oh, ow = conv.spec.output_extent(h, w)
    kh, kw = conv.spec.kernel
    return conv.cout * oh * ow * (conv.cin // conv.spec.groups) * kh * kw, oh, ow


def _linear_macs(lin: Linear, n: int) -> int:
    return n * lin.d_in * lin.d_out


def _attention_macs(attn, n: int, kind: str, window: int) -> tuple[int, int]:
    proj = n * attn.d_in * attn.dim * 3 + n * attn.dim * attn.dim
    if kind == "window":
        core = 2 * n * window * window * attn.dim
    else:
        core = 2 * n * n * attn.dim
    return proj, core


def _pcm_macs(pcm, h: int, w: int) -> int:
    total = 0
    for conv in pcm.convs:
        m, h, w = _conv_macs(conv, h, w)
        total += m
    return total


def count_flops(m: ViTAE, input_size: int | None = None) -> FlopReport:
    cfg = m.config
    size = cfg.input_size if input_size is None else input_size
    h = w = size
    kinds = {"conv2d": 0, "linear": 0, "matmul": 0}
    per_stage, substitute, performer_cells = [], 0, []
    for i, (stage, s) in enumerate(zip(m.stages, cfg.stages)):
        total = 0
        rc = stage.rc
        conv_m = 0
        for conv in rc.prm.branches:
            mm, oh, ow = _conv_macs(conv, h, w)
            conv_m += mm
        conv_m += _pcm_macs(rc.pcm, h, w)
        n = oh * ow
        proj, core = _attention_macs(rc.attn, n, rc.attention, rc.window)
        ffn = _linear_macs(rc.ffn.fc1, n) + _linear_macs(rc.ffn.fc2, n)
        kinds["conv2d"] += conv_m
        kinds["linear"] += proj + ffn
        kinds["matmul"] += core
        total += conv_m + proj + core + ffn
        if rc.attention == "performer":
            # FAVOR+ with m = D/2 features: phi(Q), phi(K) maps and the two N x m x D products.
            substitute += 2 * n * rc.attn.dim * rc.attn.dim - core
            performer_cells.append(f"stage{i + 1}.rc")
        h, w = oh, ow
        n_tok = n + (1 if cfg.class_token and i == len(cfg.stages) - 1 else 0)
        for nc in stage.ncs:
            proj, core = _attention_macs(nc.attn, n_tok, nc.attention, nc.window)
            conv_m = _pcm_macs(nc.pcm, h, w)
            ffn = _linear_macs(nc.ffn.fc1, n_tok) + _linear_macs(nc.ffn.fc2, n_tok)
            kinds["conv2d"] += conv_m
            kinds["linear"] += proj + ffn
            kinds["matmul"] += core
            total += proj + core + conv_m + ffn
        per_stage.append(total)
    head = _linear_macs(m.head, 1)
    kinds["linear"] += head
    macs = sum(per_stage) + head
    caveat = ""
    if performer_cells:
        caveat = (f"{', '.join(performer_cells)} execute exact attention; macs_table costs them as "
                  f"Performer linear attention")
    return FlopReport(macs, macs + substitute, per_stage, caveat, kinds)
