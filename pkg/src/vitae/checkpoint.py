"""Binary checkpoint format for named tensors.

Layout, little-endian throughout::

    magic      4 bytes  b"VTAE"
    version    u32      1
    flags      u32      bits 0-3: PCM kernel size (0 when unspecified)
    count      u32      number of entries
    meta_len   u32      length of the UTF-8 JSON metadata that follows
    metadata   meta_len bytes
    entries    count x {
        name_len u16, name (UTF-8), kind u8 (0 parameter, 1 buffer),
        dtype u8 (1 float32, 2 float64, 3 int64), rank u8, dims u32 x rank,
        payload_len u64, payload
    }
    crc32      u32      over every preceding byte

Entry order is the model's traversal order (parameters, then buffers), so a
save -> load -> save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointLengthError,
    CheckpointMagicError,
    CheckpointVersionError,
    DuplicateNameError,
)
from .nn import Module

MAGIC = b"VTAE"
VERSION = 1
PARAM, BUFFER = 0, 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    kinds: dict[str, int] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    pcm_kernel: int = 0
    version: int = VERSION

    @property
    def param_elements(self) -> int:
        return sum(a.size for n, a in self.tensors.items() if self.kinds.get(n, PARAM) == PARAM)

    def params(self) -> dict[str, np.ndarray]:
        return {n: a for n, a in self.tensors.items() if self.kinds.get(n, PARAM) == PARAM}


def from_model(model: Module, metadata: dict | None = None) -> Checkpoint:
    tensors, kinds = {}, {}
    for name, p in model.named_parameters():
        tensors[name], kinds[name] = p.data, PARAM
    for name, b in model.named_buffers():
        if name in tensors:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        tensors[name], kinds[name] = b, BUFFER
    meta = dict(metadata or {})
    if not meta and hasattr(model, "config"):
        meta = describe(model)
    cfg = getattr(model, "config", None)
    kernel = getattr(cfg, "pcm_kernel", 0) or 0
    return Checkpoint(tensors, kinds, meta, kernel)


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode()
    if ckpt.pcm_kernel not in (0, 1, 3):
        raise CheckpointError(f"unsupported PCM kernel flag {ckpt.pcm_kernel}")
    parts = [MAGIC, struct.pack("<IIII", ckpt.version, ckpt.pcm_kernel & 0xF, len(ckpt.tensors), len(meta)), meta]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        payload = np.ascontiguousarray(arr, dtype=dt).tobytes()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BBB", ckpt.kinds.get(name, PARAM), DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", len(payload)) + payload)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw: bytes, end: int):
        self.raw, self.pos, self.end = raw, 0, end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointLengthError(f"{what}: needs {n} bytes at offset {self.pos}, only {self.end - self.pos} left")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise CheckpointMagicError(f"not a checkpoint: magic {raw[:4]!r}")
    r = _Reader(raw, len(raw) - 4)
    r.take(4, "magic")
    version, flags, count, meta_len = r.unpack("<IIII", "header")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}; this reader supports {VERSION}")
    if len(raw) < 8:
        raise CheckpointLengthError("file too short for a checksum")
    meta = json.loads(r.take(meta_len, "metadata").decode()) if meta_len else {}
    tensors, kinds = {}, {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"entry {i} name length")
        name = r.take(name_len, f"entry {i} name").decode()
        kind, code, rank = r.unpack("<BBB", f"{name} header")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        (plen,) = r.unpack("<Q", f"{name} payload length")
        dt = CODE_DTYPES[code]
        expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if plen != expected:
            raise CheckpointLengthError(f"{name}: payload length {plen} != {expected} for shape {dims}")
        if name in tensors:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        payload = r.take(plen, f"{name} payload")
        tensors[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
        kinds[name] = kind
    if r.pos != r.end:
        raise CheckpointLengthError(f"{r.end - r.pos} trailing bytes after the last entry")
    (crc,) = struct.unpack("<I", raw[-4:])
    if crc != zlib.crc32(raw[:-4]):
        raise CheckpointChecksumError("checksum mismatch; the file is corrupted")
    return Checkpoint(tensors, kinds, meta, flags & 0xF, version)


def save_checkpoint(obj: Module | Checkpoint | dict, path, metadata: dict | None = None) -> Checkpoint:
    """Write a module, checkpoint, or ``{name: array}`` dict; returns what was written."""
    if isinstance(obj, Module):
        ckpt = from_model(obj, metadata)
    elif isinstance(obj, Checkpoint):
        ckpt = obj
    else:
        ckpt = Checkpoint(dict(obj), {}, dict(metadata or {}))
    Path(path).write_bytes(to_bytes(ckpt))
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def compare_checkpoints(a: Checkpoint, b: Checkpoint) -> list[str]:
    """Names whose presence, shape, dtype, or bytes differ."""
    diff = []
    for name in list(a.tensors) + [n for n in b.tensors if n not in a.tensors]:
        x, y = a.tensors.get(name), b.tensors.get(name)
        if x is None or y is None or x.shape != y.shape or x.dtype != y.dtype or x.tobytes() != y.tobytes():
            diff.append(name)
    return diff


def load_into(model: Module, ckpt: Checkpoint, strict: bool = True) -> list[str]:
    """Copy checkpoint tensors into ``model``; returns unmatched or missing names."""
    return model.load_state_dict(ckpt.tensors, strict=strict)


def describe(model: Module) -> dict:
    """Metadata that lets :func:`model_from_checkpoint` rebuild ``model``."""
    from dataclasses import asdict

    from .mim import PatchEncoder

    meta = {"config": asdict(model.config)}
    if isinstance(model, PatchEncoder):
        meta.update(arch="patch", patch=model.patch)
    else:
        meta["arch"] = "vitae"
    return meta


def model_from_checkpoint(ckpt: Checkpoint, strict: bool = True):
    """Build the architecture recorded in the metadata and load the weights."""
    from .config import parse_config
    from .mim import PatchEncoder
    from .model import ViTAE

    meta = ckpt.metadata
    if "config" not in meta:
        raise CheckpointError("checkpoint carries no model config")
    cfg = parse_config(json.dumps(meta["config"]))
    if meta.get("arch") == "patch":
        model = PatchEncoder(cfg, patch=meta.get("patch"))
    else:
        model = ViTAE(cfg)
    load_into(model, ckpt, strict=strict)
    return model
