"""Synthetic 2-D mixture and IDX image loading."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
KINDS = ("continuous2d", "binary_image")

RING_RADIUS = 0.75
BLOB_STD = 0.08
N_BLOBS = 8


class IDXFormatError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    train: np.ndarray
    test: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.kind == "binary_image":
            for split in (self.train, self.test):
                if split.size and not np.isin(split, (0.0, 1.0)).all():
                    raise ValueError("binary_image datasets must only contain 0 and 1")

    @property
    def dim(self) -> int:
        return self.train.shape[1]

    @property
    def all(self) -> np.ndarray:
        return np.vstack([self.train, self.test])


def sample_mixture2d(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` iid points from eight truncated Gaussian blobs on a ring inside the unit box."""
    angles = 2.0 * np.pi * rng.integers(0, N_BLOBS, size=n) / N_BLOBS
    centers = RING_RADIUS * np.column_stack([np.cos(angles), np.sin(angles)])
    offsets = BLOB_STD * rng.standard_normal((n, 2))
    # truncate each blob at 3 sd so every coordinate stays inside [-1, 1]
    bad = np.linalg.norm(offsets, axis=1) > 3 * BLOB_STD
    while bad.any():
        offsets[bad] = BLOB_STD * rng.standard_normal((int(bad.sum()), 2))
        bad = np.linalg.norm(offsets, axis=1) > 3 * BLOB_STD
    return centers + offsets


def make_mixture2d(n: int, seed=0, test_fraction: float = 0.2) -> Dataset:
    if n < 100:
        raise ValueError("mixture2d needs n >= 100")
    rng = np.random.default_rng(seed)
    data = sample_mixture2d(rng, n)
    n_test = int(round(n * test_fraction))
    return Dataset("mixture2d", data[n_test:], data[:n_test], "continuous2d")


# -- IDX ---------------------------------------------------------------------

def read_idx_images(path) -> np.ndarray:
    """Raw ``uint8`` array of shape ``(count, rows, cols)`` from an IDX3 file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16:
        raise IDXFormatError(f"truncated IDX header: file has {len(data)} bytes, header needs 16 (offset {len(data)})")
    magic, count, rows, cols = struct.unpack_from(">iiii", data, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise IDXFormatError(f"bad IDX magic 0x{magic:08x} at byte offset 0, expected 0x{IDX_IMAGE_MAGIC:08x}")
    need = 16 + count * rows * cols
    if len(data) < need:
        raise IDXFormatError(f"truncated IDX pixel data at byte offset {len(data)}, expected {need} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must have shape (count, rows, cols)")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


def load_idx_images(path, binarize_threshold: float = 0.5, test_path=None,
                    test_fraction: float = 0.0, limit: int | None = None) -> Dataset:
    """Flattened images scaled to [0, 1] and binarised with ``pixel > threshold``.

    The test split comes from ``test_path`` when given, otherwise from the
    final ``test_fraction`` of ``path``.
    """
    def binarize(raw):
        flat = raw.reshape(raw.shape[0], -1).astype(np.float64) / 255.0
        return (flat > binarize_threshold).astype(np.float64)

    train = binarize(read_idx_images(path))
    if limit is not None:
        train = train[:limit]
    if test_path is not None:
        test = binarize(read_idx_images(test_path))
    else:
        n_test = int(round(train.shape[0] * test_fraction))
        train, test = train[:train.shape[0] - n_test], train[train.shape[0] - n_test:]
    return Dataset(str(path), train, test, "binary_image")
