import gc
import json
import struct
import zlib

import numpy as np
import pytest

from vitae.checkpoint import (
    Checkpoint, compare_checkpoints, from_bytes, from_model, load_checkpoint, load_into, model_from_checkpoint,
    save_checkpoint, to_bytes,
)
from vitae.config import PRESET_NAMES, parse_config, preset, preset_text, serialize_config
from vitae.errors import (
    CheckpointChecksumError, CheckpointError, CheckpointLengthError, ConfigError, CheckpointMagicError, CheckpointVersionError,
    DuplicateNameError,
)
from vitae.mim import PatchEncoder
from vitae.model import build, count_params


def small_ckpt():
    return Checkpoint({"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "a.steps": np.array([3], dtype=np.int64)},
                      {"a.weight": 0, "a.steps": 1}, {"note": "x"}, 3)


def with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def entry(name, arr):
    raw = name.encode()
    return (struct.pack("<H", len(raw)) + raw + struct.pack("<BBB", 0, 1, arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<Q", arr.nbytes) + arr.tobytes())


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_roundtrip_is_byte_identical(name, tmp_path):
    m = build(name)
    path = tmp_path / "m.vtae"
    first = save_checkpoint(m, path)
    raw = path.read_bytes()
    again = load_checkpoint(path)
    assert to_bytes(again) == raw
    assert compare_checkpoints(first, again) == []
    assert again.param_elements == count_params(m).total
    del m, first, again, raw
    gc.collect()


def test_model_rebuilds_from_metadata(rng):
    m = build("tiny-desk", seed=3).eval()
    m2 = model_from_checkpoint(from_bytes(to_bytes(from_model(m)))).eval()
    x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
    assert np.array_equal(m(x)[0].data, m2(x)[0].data)
    assert m2.config == m.config


def test_patch_encoder_rebuilds_from_metadata():
    enc = PatchEncoder(preset("tiny-desk", pcm_kernel=1), seed=1)
    ckpt = from_bytes(to_bytes(from_model(enc)))
    assert ckpt.metadata["arch"] == "patch" and ckpt.pcm_kernel == 1
    assert isinstance(model_from_checkpoint(ckpt), PatchEncoder)


def test_kinds_and_dtypes_survive():
    back = from_bytes(to_bytes(small_ckpt()))
    assert back.kinds == {"a.weight": 0, "a.steps": 1}
    assert back.tensors["a.steps"].dtype == np.int64
    assert back.param_elements == 6 and back.pcm_kernel == 3 and back.metadata == {"note": "x"}


def test_bad_magic():
    with pytest.raises(CheckpointMagicError):
        from_bytes(b"NOPE" + to_bytes(small_ckpt())[4:])


def test_future_version():
    raw = bytearray(to_bytes(small_ckpt()))
    raw[4:8] = struct.pack("<I", 2)
    with pytest.raises(CheckpointVersionError):
        from_bytes(with_crc(bytes(raw[:-4])))


@pytest.mark.parametrize("cut", [1, 5, 30, 60])
def test_truncation(cut):
    raw = to_bytes(small_ckpt())
    with pytest.raises(CheckpointError):
        from_bytes(raw[:-cut])


def test_flipped_payload_byte_fails_checksum():
    raw = bytearray(to_bytes(small_ckpt()))
    raw[-10] ^= 0xFF
    with pytest.raises(CheckpointChecksumError):
        from_bytes(bytes(raw))


def test_trailing_garbage():
    raw = to_bytes(small_ckpt())
    with pytest.raises(CheckpointLengthError):
        from_bytes(with_crc(raw[:-4] + b"\x00\x00"))


def test_payload_length_disagrees_with_shape():
    arr = np.zeros((2, 2), dtype=np.float32)
    e = bytearray(entry("w", arr))
    e[-arr.nbytes - 8:-arr.nbytes] = struct.pack("<Q", 12)
    body = b"VTAE" + struct.pack("<IIII", 1, 0, 1, 0) + bytes(e)
    with pytest.raises(CheckpointLengthError):
        from_bytes(with_crc(body))


def test_duplicate_names():
    arr = np.ones(2, dtype=np.float32)
    body = b"VTAE" + struct.pack("<IIII", 1, 0, 2, 0) + entry("w", arr) + entry("w", arr)
    with pytest.raises(DuplicateNameError):
        from_bytes(with_crc(body))


def test_compare_reports_differences():
    a = small_ckpt()
    b = small_ckpt()
    b.tensors["a.weight"] = b.tensors["a.weight"] + 1
    b.tensors["extra"] = np.zeros(1, dtype=np.float32)
    assert compare_checkpoints(a, b) == ["a.weight", "extra"]


def test_strict_load_reports_missing():
    m = build("tiny-desk")
    ckpt = from_model(m)
    del ckpt.tensors["head.bias"]
    with pytest.raises(KeyError):
        load_into(build("tiny-desk"), ckpt, strict=True)
    assert load_into(build("tiny-desk"), ckpt, strict=False) == ["head.bias"]


def test_unsupported_dtype():
    with pytest.raises(CheckpointError):
        to_bytes(Checkpoint({"x": np.zeros(2, dtype=np.int8)}))


def test_missing_config_metadata():
    with pytest.raises(CheckpointError):
        model_from_checkpoint(small_ckpt())


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_config_text_fixed_point(name):
    text = preset_text(name)
    assert serialize_config(parse_config(text)) == text
    assert parse_config(text) == preset(name)


@pytest.mark.parametrize("edit,msg", [
    (lambda d: d.pop("variant"), "missing"),
    (lambda d: d.update(colour="red"), "unknown"),
    (lambda d: d["stages"][0].update(dilations=[]), "dilation"),
    (lambda d: d["stages"][2].update(nc_heads=3), "head"),
    (lambda d: d.update(pcm_kernel=5), "pcm_kernel"),
])
def test_config_errors(edit, msg):
    d = json.loads(preset_text("vitae-t"))
    edit(d)
    with pytest.raises(ConfigError, match=msg):
        parse_config(json.dumps(d))


def test_config_not_json():
    with pytest.raises(ConfigError):
        parse_config("{stages: ")
