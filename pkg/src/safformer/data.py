"""Small-image dataset readers and the synthetic quadrant task."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetError(ValueError):
    pass


class BadMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass


class RecordLengthError(DatasetError):
    pass


@dataclass
class LabeledImages:
    images: np.ndarray  # [N, C, H, W] float64 in [0, 1] before normalization
    labels: np.ndarray  # [N] int64

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "LabeledImages":
        return LabeledImages(self.images[:n], self.labels[:n])


@dataclass
class DatasetDescriptor:
    kind: str = "synthetic"  # idx | cifar-binary | synthetic
    paths: list = field(default_factory=list)
    classes: int = 2
    samples: int = 256
    size: int = 8
    channels: int = 3
    seed: int = 0
    mean: list = field(default_factory=list)
    std: list = field(default_factory=list)


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    buf = path.read_bytes()
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: file too short for an IDX header ({len(buf)} bytes)")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: bad IDX magic 0x{magic:08X}, expected 0x{expected_magic:08X}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise TruncatedFileError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    n = int(np.prod(dims))
    if len(buf) < head + n:
        raise TruncatedFileError(f"{path}: expected {n} data bytes, found {len(buf) - head}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=head).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledImages:
    """Read an IDX image/label file pair; pixels scaled to [0, 1]."""
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    return LabeledImages(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64))


def load_cifar_binary(path) -> LabeledImages:
    """Read CIFAR-10 binary records (1 label byte + 3x32x32 channel-major pixels)."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) % CIFAR_RECORD:
        raise RecordLengthError(f"{path}: length {len(buf)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledImages(images, rec[:, 0].astype(np.int64))


def gen_synthetic(classes: int = 2, samples: int = 256, size: int = 8, seed: int = 0,
                  channels: int = 3, noise: float = 0.1) -> LabeledImages:
    """Bright square in quadrant ``label`` over uniform noise.

    Quadrants are numbered row-major: 0 top-left, 1 top-right, 2 bottom-left,
    3 bottom-right. Labels cycle through the classes before shuffling.
    """
    if not 1 <= classes <= 4:
        raise DatasetError(f"quadrant task supports 1..4 classes, got {classes}")
    if size < 8 or size % 2:
        raise DatasetError(f"size must be even and >= 8, got {size}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(samples) % classes)
    images = rng.uniform(0.0, noise, size=(samples, channels, size, size))
    h = size // 2
    for i, c in enumerate(labels):
        r, col = divmod(int(c), 2)
        images[i, :, r * h:(r + 1) * h, col * h:(col + 1) * h] += 1.0 - noise
    return LabeledImages(images, labels.astype(np.int64))


def normalize(data: LabeledImages, mean, std) -> LabeledImages:
    if not mean:
        return data
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return LabeledImages((data.images - m) / s, data.labels)


def load_dataset(desc: DatasetDescriptor, base_dir: Path | None = None) -> LabeledImages:
    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() or base_dir is None else base_dir / p

    if desc.kind == "synthetic":
        data = gen_synthetic(desc.classes, desc.samples, desc.size, desc.seed, desc.channels)
    elif desc.kind == "idx":
        if len(desc.paths) != 2:
            raise DatasetError("idx datasets need [images_path, labels_path]")
        data = load_idx(resolve(desc.paths[0]), resolve(desc.paths[1]))
    elif desc.kind == "cifar-binary":
        if not desc.paths:
            raise DatasetError("cifar-binary datasets need at least one path")
        parts = [load_cifar_binary(resolve(p)) for p in desc.paths]
        data = LabeledImages(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))
    else:
        raise DatasetError(f"unknown dataset kind {desc.kind!r}")
    if len(data) and (data.labels.min() < 0 or data.labels.max() >= desc.classes):
        raise DatasetError(f"labels outside [0, {desc.classes})")
    if desc.kind != "synthetic" and desc.samples and desc.samples < len(data):
        data = data.subset(desc.samples)
    return normalize(data, desc.mean, desc.std)
