import struct

import numpy as np
import pytest

from safformer.data import (
    BadMagicError,
    CountMismatchError,
    DatasetDescriptor,
    DatasetError,
    RecordLengthError,
    TruncatedFileError,
    gen_synthetic,
    load_cifar_binary,
    load_dataset,
    load_idx,
)


def write_idx(path, magic, dims, payload: bytes):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + payload)


@pytest.fixture
def idx_pair(tmp_path):
    pixels = np.arange(32, dtype=np.uint8).reshape(2, 4, 4) * 8
    write_idx(tmp_path / "img", 0x803, (2, 4, 4), pixels.tobytes())
    write_idx(tmp_path / "lbl", 0x801, (2,), bytes([7, 3]))
    return tmp_path / "img", tmp_path / "lbl", pixels


def test_idx_round_trip(idx_pair):
    img, lbl, pixels = idx_pair
    data = load_idx(img, lbl)
    assert data.images.shape == (2, 1, 4, 4)
    np.testing.assert_array_equal(data.images[:, 0], pixels / 255.0)
    np.testing.assert_array_equal(data.labels, [7, 3])


def test_idx_errors(tmp_path, idx_pair):
    img, lbl, _ = idx_pair
    empty = tmp_path / "empty"
    empty.write_bytes(b"")
    with pytest.raises(TruncatedFileError):
        load_idx(empty, lbl)
    bad = tmp_path / "bad"
    bad.write_bytes(struct.pack(">I", 0xDEADBEEF) + b"\x00" * 16)
    with pytest.raises(BadMagicError):
        load_idx(bad, lbl)
    short = tmp_path / "short"
    short.write_bytes(img.read_bytes()[:-5])
    with pytest.raises(TruncatedFileError):
        load_idx(short, lbl)
    three = tmp_path / "three"
    write_idx(three, 0x801, (3,), bytes([1, 2, 3]))
    with pytest.raises(CountMismatchError):
        load_idx(img, three)
    with pytest.raises(BadMagicError):
        load_idx(lbl, img)  # swapped files


def test_error_types_are_distinct():
    kinds = {BadMagicError, TruncatedFileError, CountMismatchError, RecordLengthError}
    assert len(kinds) == 4 and all(issubclass(k, DatasetError) for k in kinds)


def test_cifar_record(tmp_path):
    rng = np.random.default_rng(0)
    pix = rng.integers(0, 256, size=(3, 32, 32), dtype=np.uint8)
    path = tmp_path / "batch.bin"
    path.write_bytes(bytes([4]) + pix.tobytes())
    data = load_cifar_binary(path)
    assert data.labels.tolist() == [4]
    np.testing.assert_array_equal(data.images[0], pix / 255.0)


def test_cifar_empty_and_bad_length(tmp_path):
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    assert len(load_cifar_binary(empty)) == 0
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x00" * 3072)
    with pytest.raises(RecordLengthError):
        load_cifar_binary(bad)


def test_synthetic_determinism():
    a, b = gen_synthetic(2, 32, 8, seed=9), gen_synthetic(2, 32, 8, seed=9)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert gen_synthetic(2, 32, 8, seed=10).images.tobytes() != a.images.tobytes()


@pytest.mark.parametrize("classes", [2, 3, 4])
def test_synthetic_quadrant_means(classes):
    data = gen_synthetic(classes, 40, 8, seed=1)
    assert set(data.labels.tolist()) == set(range(classes))
    for img, label in zip(data.images, data.labels):
        q = [img[:, r * 4:(r + 1) * 4, c * 4:(c + 1) * 4].mean() for r in (0, 1) for c in (0, 1)]
        others = [v for i, v in enumerate(q) if i != label]
        assert q[label] - max(others) >= 0.5


def test_synthetic_is_linearly_separable():
    data = gen_synthetic(2, 256, 8, seed=0)
    x = np.hstack([data.images.reshape(len(data), -1), np.ones((len(data), 1))])
    target = np.where(data.labels == 1, 1.0, -1.0)
    w, *_ = np.linalg.lstsq(x, target, rcond=None)
    assert np.mean(np.sign(x @ w) == target) == 1.0


@pytest.mark.parametrize("kw", [dict(classes=5), dict(classes=0), dict(size=6), dict(size=9)])
def test_synthetic_rejects(kw):
    args = dict(classes=2, samples=8, size=8, seed=0)
    args.update(kw)
    with pytest.raises(DatasetError):
        gen_synthetic(**args)


def test_load_dataset_paths_labels_and_normalization(tmp_path, idx_pair):
    img, lbl, _ = idx_pair
    with pytest.raises(DatasetError, match="labels outside"):
        load_dataset(DatasetDescriptor(kind="idx", paths=[img.name, lbl.name], classes=2), tmp_path)
    data = load_dataset(DatasetDescriptor(kind="idx", paths=[str(img), str(lbl)], classes=10, samples=1,
                                          mean=[0.5], std=[0.25]))
    assert len(data) == 1
    assert data.images.min() == pytest.approx((0 - 0.5) / 0.25)
    with pytest.raises(DatasetError):
        load_dataset(DatasetDescriptor(kind="png"))
    with pytest.raises(DatasetError):
        load_dataset(DatasetDescriptor(kind="idx", paths=[str(img)]))


def test_missing_file_is_os_error(tmp_path):
    with pytest.raises(OSError):
        load_cifar_binary(tmp_path / "nope.bin")
