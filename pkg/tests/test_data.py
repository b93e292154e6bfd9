import gzip

import numpy as np
import pytest

from vitae.data import (
    CIFAR_MEAN, CIFAR_STD, Dataset, HFlip, Normalize, PadCrop, augment, denormalize, load_mnist, normalize,
    pad_images, read_cifar10, read_idx,
)
from vitae.errors import BadMagicError, CountMismatchError, DataFormatError, TruncatedFileError


def idx_images(n, rows=4, cols=4, fill=None):
    data = np.arange(n * rows * cols, dtype=np.uint8) if fill is None else fill
    return (0x803).to_bytes(4, "big") + b"".join(v.to_bytes(4, "big") for v in (n, rows, cols)) + bytes(data)


def idx_labels(labels):
    return (0x801).to_bytes(4, "big") + len(labels).to_bytes(4, "big") + bytes(labels)


@pytest.fixture
def idx_pair(tmp_path):
    def write(img: bytes, lab: bytes, gz=False):
        ip, lp = tmp_path / "img", tmp_path / "lab"
        if gz:
            ip, lp = ip.with_suffix(".gz"), lp.with_suffix(".gz")
            ip.write_bytes(gzip.compress(img))
            lp.write_bytes(gzip.compress(lab))
        else:
            ip.write_bytes(img)
            lp.write_bytes(lab)
        return ip, lp
    return write


@pytest.mark.parametrize("gz", [False, True])
def test_reads_idx_pair(idx_pair, gz):
    ds = read_idx(*idx_pair(idx_images(3), idx_labels([1, 2, 9]), gz))
    assert ds.images.shape == (3, 1, 4, 4) and ds.images.dtype == np.float32
    assert ds.images[0, 0, 0, 1] == pytest.approx(1 / 255)
    assert ds.labels.tolist() == [1, 2, 9]


def test_bad_magic(idx_pair):
    img = b"\x00\x00\x08\x02" + idx_images(2)[4:]
    with pytest.raises(BadMagicError):
        read_idx(*idx_pair(img, idx_labels([0, 1])))


def test_truncated_file_reports_sizes(idx_pair):
    img = idx_images(2)[:-5]
    with pytest.raises(TruncatedFileError, match="expected 48 bytes, found 43"):
        read_idx(*idx_pair(img, idx_labels([0, 1])))


def test_truncated_header(idx_pair):
    with pytest.raises(TruncatedFileError):
        read_idx(*idx_pair(idx_images(2)[:10], idx_labels([0, 1])))


def test_count_mismatch(idx_pair):
    with pytest.raises(CountMismatchError):
        read_idx(*idx_pair(idx_images(2), idx_labels([0, 1, 2])))


def test_trailing_bytes(idx_pair):
    with pytest.raises(DataFormatError):
        read_idx(*idx_pair(idx_images(2) + b"\x00", idx_labels([0, 1])))


def test_labels_out_of_range(idx_pair):
    with pytest.raises(DataFormatError):
        read_idx(*idx_pair(idx_images(1), idx_labels([10])))


def test_cifar_records(tmp_path):
    g = np.random.default_rng(0)
    rec = g.integers(0, 256, (5, 3073), dtype=np.uint8)
    rec[:, 0] = [0, 3, 9, 1, 1]
    p = tmp_path / "data_batch_1.bin"
    p.write_bytes(rec.tobytes())
    ds = read_cifar10([p, p])
    assert ds.images.shape == (10, 3, 32, 32)
    assert ds.labels.tolist()[:5] == [0, 3, 9, 1, 1]
    assert ds.images[1, 2, 0, 0] == pytest.approx(rec[1, 1 + 2 * 1024] / 255)


def test_cifar_bad_length(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"\x00" * 3074)
    with pytest.raises(DataFormatError):
        read_cifar10(p)


def test_real_mnist_test_split(mnist_dir):
    ds = load_mnist(mnist_dir, "test")
    assert len(ds) == 10000
    assert ds.images.shape == (10000, 1, 32, 32)
    assert set(np.unique(ds.labels)) == set(range(10))
    assert ds.images[:, :, :2].max() == 0.0
    raw = load_mnist(mnist_dir, "test", pad_to=None)
    np.testing.assert_array_equal(ds.images[:, :, 2:30, 2:30], raw.images)


def test_pad_images_cannot_shrink():
    with pytest.raises(DataFormatError):
        pad_images(np.zeros((1, 1, 8, 8)), 4)


def test_normalize_roundtrip(rng):
    x = rng.random((2, 3, 4, 4)).astype(np.float32)
    y = normalize(x, CIFAR_MEAN, CIFAR_STD)
    np.testing.assert_allclose(denormalize(y, CIFAR_MEAN, CIFAR_STD), x, atol=1e-6)
    with pytest.raises(ValueError):
        normalize(x, (0.1, 0.2), (1.0, 1.0))


def test_batches_cover_dataset_once(rng):
    ds = Dataset(np.zeros((10, 1, 2, 2), dtype=np.float32), np.arange(10) % 3, 3)
    seen = np.concatenate([lab for _, lab in ds.batches(4, np.random.default_rng(0))])
    assert len(seen) == 10 and sorted(seen.tolist()) == sorted(ds.labels.tolist())


def test_augment_is_seeded(rng):
    x = rng.random((6, 3, 8, 8)).astype(np.float32)
    ops = [PadCrop(2), HFlip()]
    assert np.array_equal(augment(x, ops, 5), augment(x, ops, 5))
    assert not np.array_equal(augment(x, ops, 5), augment(x, ops, 6))


def test_zero_pad_crop_is_identity(rng):
    x = rng.random((2, 1, 5, 5))
    assert np.array_equal(augment(x, [PadCrop(0)], 0), x)


def test_pad_crop_shifts_content(rng):
    x = rng.random((50, 1, 6, 6)) + 1.0
    y = augment(x, [PadCrop(1)], 0)
    for a, b in zip(x, y):
        found = False
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                shifted = np.zeros_like(a)
                src = a[:, max(dy, 0):6 + min(dy, 0), max(dx, 0):6 + min(dx, 0)]
                shifted[:, max(-dy, 0):6 + min(-dy, 0), max(-dx, 0):6 + min(-dx, 0)] = src
                found |= np.array_equal(shifted, b)
        assert found


def test_forced_flip(rng):
    x = rng.random((2, 1, 3, 4))
    y = augment(x, [HFlip()], 0, flip_mask=np.array([True, False]))
    np.testing.assert_array_equal(y[0], x[0, :, :, ::-1])
    np.testing.assert_array_equal(y[1], x[1])


def test_flip_probability():
    x = np.arange(4000 * 2, dtype=np.float64).reshape(4000, 1, 1, 2)
    y = augment(x, [HFlip(0.5)], 1)
    assert abs((y[:, 0, 0, 0] > x[:, 0, 0, 0]).mean() - 0.5) < 0.03


def test_normalize_op_and_bad_crop(rng):
    x = rng.random((1, 3, 4, 4)).astype(np.float32)
    np.testing.assert_allclose(augment(x, [Normalize(CIFAR_MEAN, CIFAR_STD)], 0), normalize(x, CIFAR_MEAN, CIFAR_STD))
    with pytest.raises(ValueError):
        augment(x, [PadCrop(4)], 0)
