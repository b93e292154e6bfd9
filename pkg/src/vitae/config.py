"""Model configurations, the named presets, and their JSON text form."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError

ATTENTION_KINDS = ("full", "window", "performer")

# Published parameter (M) and GFLOP budgets for each preset.
REFERENCE_BUDGETS = {
    "vitae-t": (4.8, 1.5),
    "vitae-6m": (6.5, 2.0),
    "vitae-13m": (13.2, 3.3),
    "vitae-s": (23.6, 5.6),
    "vitaev2-s": (19.3, 5.7),
    "vitaev2-48m": (48.7, 13.3),
    "vitaev2-b": (89.7, 24.3),
}


@dataclass
class StageConfig:
    embed: int
    dilations: list[int]
    reduction: int
    kernel: int | None = None
    rc_attention: str = "full"
    rc_heads: int = 1
    nc_count: int = 0
    nc_attention: str = "full"
    nc_heads: int = 1
    nc_groups: int | None = None
    window: int = 7


@dataclass
class ModelConfig:
    name: str
    variant: str
    stages: list[StageConfig]
    ffn_ratio: float = 4.0
    num_classes: int = 1000
    in_chans: int = 3
    input_size: int = 224
    pcm_kernel: int = 3
    attn_scale: str = "head"
    activation: str = "gelu"

    @property
    def class_token(self) -> bool:
        return self.variant == "isotropic"

    @property
    def total_reduction(self) -> int:
        r = 1
        for s in self.stages:
            r *= s.reduction
        return r

    def stage_grids(self, input_size: int | None = None) -> list[int]:
        n = self.input_size if input_size is None else input_size
        out = []
        for s in self.stages:
            n //= s.reduction
            out.append(n)
        return out

    def copy(self, **overrides) -> "ModelConfig":
        cfg = copy.deepcopy(self)
        for k, v in overrides.items():
            if not hasattr(cfg, k):
                raise ConfigError(f"unknown config field {k!r}")
            setattr(cfg, k, v)
        return validate(cfg)


def _resolve_defaults(cfg: ModelConfig) -> None:
    for i, s in enumerate(cfg.stages):
        if s.kernel is None:
            s.kernel = 7 if i == 0 else 3
        if s.nc_groups is None:
            s.nc_groups = max(1, s.embed // 4)


def validate(cfg: ModelConfig, input_size: int | None = None) -> ModelConfig:
    """Fill defaults and check structural invariants; raise :class:`ConfigError`."""
    _resolve_defaults(cfg)
    if cfg.variant == "isotropic":
        if len(cfg.stages) != 3 or [s.reduction for s in cfg.stages] != [4, 2, 2]:
            raise ConfigError("isotropic models need exactly 3 reduction cells with ratios (4, 2, 2)")
        if any(s.nc_count for s in cfg.stages[:2]):
            raise ConfigError("isotropic models place normal cells only after the last reduction cell")
        if any(s.nc_attention == "window" for s in cfg.stages):
            raise ConfigError("the class token only takes part in full attention")
    elif cfg.variant == "multistage":
        if len(cfg.stages) != 4 or [s.reduction for s in cfg.stages] != [4, 2, 2, 2]:
            raise ConfigError("multistage models need exactly 4 stages with ratios (4, 2, 2, 2)")
    else:
        raise ConfigError(f"unknown variant {cfg.variant!r}")
    if cfg.pcm_kernel not in (1, 3):
        raise ConfigError(f"pcm_kernel must be 1 or 3, got {cfg.pcm_kernel}")
    if cfg.attn_scale not in ("head", "model"):
        raise ConfigError(f"attn_scale must be 'head' or 'model', got {cfg.attn_scale!r}")
    if cfg.ffn_ratio <= 0 or cfg.num_classes < 1 or cfg.in_chans < 1:
        raise ConfigError("ffn_ratio, num_classes and in_chans must be positive")
    for i, s in enumerate(cfg.stages):
        where = f"stage {i + 1}"
        if not s.dilations or any(d < 1 for d in s.dilations):
            raise ConfigError(f"{where}: dilation set must be non-empty and positive")
        if s.embed < len(s.dilations):
            raise ConfigError(f"{where}: embedding {s.embed} narrower than {len(s.dilations)} PRM branches")
        if s.rc_attention not in ATTENTION_KINDS or s.nc_attention not in ("full", "window"):
            raise ConfigError(f"{where}: unknown attention kind")
        if s.embed % s.rc_heads or s.embed % s.nc_heads:
            raise ConfigError(f"{where}: embedding {s.embed} not divisible by head count")
        if s.nc_groups < 1 or s.embed % s.nc_groups:
            raise ConfigError(f"{where}: embedding {s.embed} not divisible by {s.nc_groups} PCM groups")
        if s.kernel % 2 == 0 or s.nc_count < 0 or s.window < 1:
            raise ConfigError(f"{where}: kernel must be odd, nc_count >= 0, window >= 1")
    check_input_size(cfg, cfg.input_size if input_size is None else input_size)
    return cfg


def check_input_size(cfg: ModelConfig, size: int) -> None:
    if size % cfg.total_reduction:
        raise ConfigError(f"input size {size} is not divisible by the total reduction {cfg.total_reduction}")
    for i, (s, g) in enumerate(zip(cfg.stages, cfg.stage_grids(size))):
        uses_window = s.rc_attention == "window" or (s.nc_attention == "window" and s.nc_count)
        if uses_window and g % s.window:
            raise ConfigError(
                f"stage {i + 1}: token grid {g}x{g} is not divisible by window {s.window}; "
                f"choose an input size whose stage grids are multiples of {s.window}"
            )


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

_ISO_DILATIONS = [[1, 2, 3, 4], [1, 2, 3], [1, 2]]
_MS_DILATIONS = [[1, 2, 3, 4], [1, 2, 3], [1, 2], [1, 2]]


def _isotropic(name, embeds, depth, nc_heads=4, ffn_ratio=2.0, rc_attention="performer", **kw):
    stages = [
        StageConfig(embed=e, dilations=list(d), reduction=r, rc_attention=rc_attention, rc_heads=1,
                    nc_count=depth if i == 2 else 0, nc_heads=nc_heads)
        for i, (e, d, r) in enumerate(zip(embeds, _ISO_DILATIONS, (4, 2, 2)))
    ]
    return ModelConfig(name=name, variant="isotropic", stages=stages, ffn_ratio=ffn_ratio, **kw)


def _multistage(name, embeds, depths, ffn_ratio=3.0, **kw):
    kinds = ("window", "window", "full", "full")
    rc_heads, nc_heads = (1, 1, 2, 4), (1, 2, 4, 8)
    stages = [
        StageConfig(embed=e, dilations=list(d), reduction=r, rc_attention=k, rc_heads=rh,
                    nc_count=n, nc_attention=k, nc_heads=nh, nc_groups=1 if i == 0 else e // 4)
        for i, (e, d, r, k, rh, n, nh) in enumerate(
            zip(embeds, _MS_DILATIONS, (4, 2, 2, 2), kinds, rc_heads, depths, nc_heads))
    ]
    return ModelConfig(name=name, variant="multistage", stages=stages, ffn_ratio=ffn_ratio, **kw)


def _tiny_desk():
    return _isotropic("tiny-desk", (32, 32, 64), 2, nc_heads=2, ffn_ratio=2.0, rc_attention="full",
                      num_classes=10, input_size=32)


_PRESETS = {
    "vitae-t": lambda: _isotropic("vitae-t", (64, 64, 256), 7),
    "vitae-6m": lambda: _isotropic("vitae-6m", (64, 64, 256), 10),
    "vitae-13m": lambda: _isotropic("vitae-13m", (64, 64, 320), 11),
    "vitae-s": lambda: _isotropic("vitae-s", (96, 192, 384), 14),
    "vitaev2-s": lambda: _multistage("vitaev2-s", (64, 128, 256, 512), (2, 2, 8, 2)),
    "vitaev2-48m": lambda: _multistage("vitaev2-48m", (96, 192, 384, 768), (2, 2, 11, 2)),
    "vitaev2-b": lambda: _multistage("vitaev2-b", (128, 256, 512, 1024), (2, 2, 12, 2)),
    "tiny-desk": _tiny_desk,
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = _PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}") from None
    for k, v in overrides.items():
        if not hasattr(cfg, k):
            raise ConfigError(f"unknown config field {k!r}")
        setattr(cfg, k, v)
    return validate(cfg)


# ---------------------------------------------------------------------------
# Text interchange (JSON)
# ---------------------------------------------------------------------------

_STAGE_FIELDS = {f.name for f in fields(StageConfig)}
_MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
_REQUIRED_MODEL = {"name", "variant", "stages"}
_REQUIRED_STAGE = {"embed", "dilations", "reduction"}


def parse_config(text: str) -> ModelConfig:
    """Parse JSON config text into a validated :class:`ModelConfig`."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _MODEL_FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    missing = _REQUIRED_MODEL - set(raw)
    if missing:
        raise ConfigError(f"missing required config keys: {sorted(missing)}")
    if not isinstance(raw["stages"], list):
        raise ConfigError("'stages' must be a list")
    stages = []
    for i, s in enumerate(raw["stages"]):
        if not isinstance(s, dict):
            raise ConfigError(f"stage {i + 1} must be an object")
        unknown = set(s) - _STAGE_FIELDS
        if unknown:
            raise ConfigError(f"stage {i + 1}: unknown keys {sorted(unknown)}")
        missing = _REQUIRED_STAGE - set(s)
        if missing:
            raise ConfigError(f"stage {i + 1}: missing keys {sorted(missing)}")
        stages.append(StageConfig(**s))
    cfg = ModelConfig(**{**raw, "stages": stages})
    return validate(cfg)


def serialize_config(cfg: ModelConfig) -> str:
    """Emit the full config (defaults included) as JSON text."""
    return json.dumps(asdict(validate(copy.deepcopy(cfg))), indent=2) + "\n"


def preset_text(name: str) -> str:
    return serialize_config(preset(name))
