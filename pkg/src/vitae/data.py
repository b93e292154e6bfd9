"""MNIST IDX and CIFAR-10 binary readers, batching, and seeded augmentation."""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import BadMagicError, CountMismatchError, DataFormatError, TruncatedFileError
from .rng import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR_MEAN, CIFAR_STD = (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataFormatError(f"images {self.images.shape} and labels {self.labels.shape} do not pair up")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.arange(len(self))[idx] if isinstance(idx, slice) else np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield ``(images, labels)`` in order, or shuffled when ``rng`` is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _idx_header(raw: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFileError(f"{path}: header needs {head} bytes, file has {len(raw)}")
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = tuple(int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))
    expected = head + int(np.prod(dims))
    if len(raw) != expected:
        kind = TruncatedFileError if len(raw) < expected else DataFormatError
        raise kind(f"{path}: expected {expected} bytes, found {len(raw)}")
    return dims


def read_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label pair (optionally gzipped) into ``[N, 1, H, W]`` floats in [0, 1]."""
    raw_img, raw_lab = _read_bytes(images_path), _read_bytes(labels_path)
    n, rows, cols = _idx_header(raw_img, images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,) = _idx_header(raw_lab, labels_path, IDX_LABELS_MAGIC, 1)
    if n != n_lab:
        raise CountMismatchError(f"{images_path} has {n} images but {labels_path} has {n_lab} labels")
    images = np.frombuffer(raw_img, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(raw_lab, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset((images / np.float32(255.0)).astype(np.float32), labels, 10)


def read_cifar10(paths: Sequence) -> Dataset:
    """Concatenate CIFAR-10 binary batch files (1 label byte + 3072 planar RGB bytes per record)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    chunks = []
    for p in paths:
        raw = _read_bytes(p)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{p}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    rec = np.concatenate(chunks)
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return Dataset((images / np.float32(255.0)).astype(np.float32), rec[:, 0].astype(np.int64), 10)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] under {directory}")


def mnist_dir() -> Path:
    return Path(os.environ.get("VITAE_MNIST_DIR", "data/mnist"))


def load_mnist(directory=None, split: str = "train", pad_to: int | None = 32) -> Dataset:
    """Load an MNIST split from a directory holding the four standard IDX files."""
    d = Path(directory) if directory is not None else mnist_dir()
    prefix = {"train": "train", "test": "t10k"}[split]
    ds = read_idx(_find(d, f"{prefix}-images-idx3-ubyte"), _find(d, f"{prefix}-labels-idx1-ubyte"))
    if pad_to is not None:
        ds = Dataset(pad_images(ds.images, pad_to), ds.labels, ds.num_classes)
    return ds


def pad_images(images: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad ``[N, C, H, W]`` symmetrically to ``size x size``."""
    h, w = images.shape[2:]
    if h > size or w > size:
        raise DataFormatError(f"cannot pad {h}x{w} images down to {size}")
    top, left = (size - h) // 2, (size - w) // 2
    return np.pad(images, ((0, 0), (0, 0), (top, size - h - top), (left, size - w - left)))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PadCrop:
    pad: int


@dataclass(frozen=True)
class HFlip:
    prob: float = 0.5


@dataclass(frozen=True)
class Normalize:
    mean: tuple[float, ...]
    std: tuple[float, ...]


def _channel(vals, c: int, dtype) -> np.ndarray:
    arr = np.asarray(vals, dtype=np.float64)
    if arr.size not in (1, c):
        raise ValueError(f"{arr.size} normalization constants for {c} channels")
    return np.broadcast_to(arr, (c,)).reshape(1, c, 1, 1).astype(dtype)


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    c = images.shape[1]
    return (images - _channel(mean, c, images.dtype)) / _channel(std, c, images.dtype)


def denormalize(images: np.ndarray, mean, std) -> np.ndarray:
    c = images.shape[1]
    return images * _channel(std, c, images.dtype) + _channel(mean, c, images.dtype)


def augment(images: np.ndarray, ops: Sequence, seed: int, flip_mask: np.ndarray | None = None) -> np.ndarray:
    """Apply ``ops`` in order with a generator keyed by ``seed``.

    ``flip_mask`` forces which samples an :class:`HFlip` flips.
    """
    rng = make_rng(seed, 20)
    x = np.asarray(images)
    n, _, h, w = x.shape
    for op in ops:
        if isinstance(op, PadCrop):
            p = op.pad
            if p < 0 or p >= min(h, w):
                raise ValueError(f"pad_crop({p}) is too large for {h}x{w} images")
            if p == 0:
                continue
            padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            dy = rng.integers(0, 2 * p + 1, n)
            dx = rng.integers(0, 2 * p + 1, n)
            x = np.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
        elif isinstance(op, HFlip):
            flip = flip_mask if flip_mask is not None else rng.random(n) < op.prob
            x = np.where(np.asarray(flip).reshape(n, 1, 1, 1), x[..., ::-1], x)
        elif isinstance(op, Normalize):
            x = normalize(x, op.mean, op.std)
        else:
            raise ValueError(f"unknown augmentation op {op!r}")
    return np.ascontiguousarray(x)
