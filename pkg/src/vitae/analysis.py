"""Mean attention distance and a parameter/MAC report against the reference table."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import AttentionStats
from .config import REFERENCE_BUDGETS, PRESET_NAMES
from .errors import ShapeError


def grid_distances(grid: tuple[int, int]) -> np.ndarray:
    """Euclidean distance between every pair of raster-ordered grid cells, ``[N, N]``."""
    ys, xs = np.divmod(np.arange(grid[0] * grid[1]), grid[1])
    return np.hypot(ys[:, None] - ys[None, :], xs[:, None] - xs[None, :])


def attention_distance(stats: AttentionStats) -> float:
    """Mean over batch, heads, and queries of ``sum_j A[i, j] * dist(i, j) * stride_px``.

    The class-token row and column are dropped and the remaining weights are
    not renormalized, so mass placed on the class token counts as distance 0.
    """
    w = np.asarray(stats.weights, dtype=np.float64)
    if w.ndim != 4 or w.shape[-1] != w.shape[-2]:
        raise ShapeError(f"attention weights must be [B, h, N, N], got {w.shape}")
    n_sp = stats.grid[0] * stats.grid[1]
    offset = 1 if stats.has_class_token else 0
    if w.shape[-1] != n_sp + offset:
        raise ShapeError(f"{w.shape[-1]} tokens do not match grid {stats.grid} (class token: {stats.has_class_token})")
    w = w[..., offset:, offset:]
    dist = grid_distances(stats.grid) * stats.stride_px
    return float((w * dist).sum(axis=-1).mean())


def attention_distances(stats: Sequence[AttentionStats]) -> dict[str, float]:
    return {s.name or f"layer{i + 1}": attention_distance(s) for i, s in enumerate(stats)}


@dataclass
class Report:
    records: list[dict]
    text: str

    def jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def model_report(presets: Sequence[str] | None = None) -> Report:
    """Build each preset and compare params and MACs with the reference values."""
    from .model import build, count_flops, count_params

    names = list(presets) if presets else [n for n in PRESET_NAMES if n in REFERENCE_BUDGETS]
    records = []
    for name in names:
        m = build(name)
        params = count_params(m).total
        flops = count_flops(m)
        ref_p, ref_m = REFERENCE_BUDGETS.get(name, (None, None))
        rec = {
            "preset": name,
            "params_m": params / 1e6,
            "ref_params_m": ref_p,
            "params_delta": None if ref_p is None else (params / 1e6 - ref_p) / ref_p,
            "gmacs": flops.gmacs_table,
            "gmacs_exact": flops.gmacs,
            "ref_gmacs": ref_m,
            "gmacs_delta": None if ref_m is None else (flops.gmacs_table - ref_m) / ref_m,
            "caveat": flops.caveat,
        }
        records.append(rec)

    def fmt(v, spec):
        return format(v, spec) if v is not None else "-".rjust(int(spec.lstrip("+").split(".")[0]))

    header = f"{'preset':<12} {'params(M)':>10} {'ref':>7} {'delta':>7} {'MACs(G)':>8} {'exact':>7} {'ref':>7} {'delta':>7}"
    lines = [header, "-" * len(header)]
    notes = []
    for r in records:
        mark = " *" if r["caveat"] else ""
        lines.append(
            f"{r['preset']:<12} {r['params_m']:>10.2f} {fmt(r['ref_params_m'], '7.1f')} "
            f"{fmt(r['params_delta'], '+7.1%')} {r['gmacs']:>8.2f} {r['gmacs_exact']:>7.2f} "
            f"{fmt(r['ref_gmacs'], '7.1f')} {fmt(r['gmacs_delta'], '+7.1%')}{mark}"
        )
        if r["caveat"]:
            notes.append(f"* {r['preset']}: {r['caveat']}")
    return Report(records, "\n".join(lines + notes) + "\n")
