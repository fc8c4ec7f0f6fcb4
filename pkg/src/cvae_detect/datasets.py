"""Loaders for the MNIST IDX and CIFAR-10 binary formats.

Both datasets are canonicalized to float32 tensors of shape (n, c, 32, 32)
with pixel values in [0, 1]. MNIST's 28x28 images are zero-padded by 2 pixels
on each side so that the same stride-2 conv stack applies to both datasets.
Loading is offline and order-deterministic; nothing here touches the network.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import DataConsistencyError, DataFormatError

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
NUM_CLASSES = 10
CANONICAL_SIZE = 32


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable image/label pair with a dataset tag.

    images: float32 tensor (n, c, 32, 32), values in [0, 1]
    labels: int64 tensor (n,), values in 0..9
    """

    images: torch.Tensor
    labels: torch.Tensor
    name: str = "unnamed"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got shape {tuple(self.images.shape)}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise DataConsistencyError(
                f"{len(self.labels)} labels for {len(self.images)} images"
            )
        object.__setattr__(self, "images", self.images.to(torch.float32))
        object.__setattr__(self, "labels", self.labels.to(torch.int64))

    def __len__(self):
        return len(self.images)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], name=self.name)


def _read_bytes(path) -> bytes:
    """Read a file, transparently decompressing gzip (magic 0x1f 0x8b)."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, expected_dims: int, path) -> np.ndarray:
    header_len = 4 + 4 * expected_dims
    if len(raw) < header_len:
        raise DataFormatError(
            f"{path}: truncated IDX header, file ends at byte {len(raw)} "
            f"but header needs {header_len} bytes"
        )
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: bad IDX magic 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}"
        )
    dims = struct.unpack(f">{expected_dims}I", raw[4:header_len])
    count = int(np.prod(dims))
    if len(raw) != header_len + count:
        raise DataFormatError(
            f"{path}: expected {header_len + count} bytes for dims {dims}, "
            f"file ends at byte {len(raw)}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def load_mnist(images_path, labels_path, name: str = "mnist") -> LabeledDataset:
    """Parse an MNIST IDX image/label file pair.

    Pixels are mapped to [0, 1] by division by 255 and the 28x28 frames are
    zero-padded to the canonical 32x32. Plain and gzipped files both work.
    """
    images = _parse_idx(_read_bytes(images_path), MNIST_IMAGE_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), MNIST_LABEL_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataConsistencyError(
            f"{images.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}"
        )
    if labels.max(initial=0) > 9:
        raise DataFormatError(f"{labels_path}: label byte {int(labels.max())} out of range 0..9")

    n, h, w = images.shape
    pixels = images.astype(np.float32) / 255.0
    if (h, w) != (CANONICAL_SIZE, CANONICAL_SIZE):
        pad_h, pad_w = CANONICAL_SIZE - h, CANONICAL_SIZE - w
        if pad_h < 0 or pad_w < 0 or pad_h % 2 or pad_w % 2:
            raise DataFormatError(f"{images_path}: cannot pad {h}x{w} frames to 32x32 symmetrically")
        pixels = np.pad(pixels, ((0, 0), (pad_h // 2, pad_h // 2), (pad_w // 2, pad_w // 2)))
    return LabeledDataset(
        torch.from_numpy(pixels[:, None, :, :].copy()),
        torch.from_numpy(labels.astype(np.int64)),
        name=name,
    )


def load_cifar10(batch_paths: Sequence, name: str = "cifar10") -> LabeledDataset:
    """Parse CIFAR-10 binary batches (3073-byte records, channel-major RGB)."""
    if not batch_paths:
        raise ValueError("need at least one CIFAR-10 batch file")
    all_images, all_labels = [], []
    for path in batch_paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
            raise DataFormatError(
                f"{path}: file length {len(raw)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        if labels.max(initial=0) > 9:
            bad = int(np.argmax(labels > 9))
            raise DataFormatError(
                f"{path}: record {bad} has label byte {int(labels[bad])} > 9"
            )
        all_labels.append(labels.astype(np.int64))
        all_images.append(
            records[:, 1:].reshape(-1, 3, CANONICAL_SIZE, CANONICAL_SIZE).astype(np.float32) / 255.0
        )
    return LabeledDataset(
        torch.from_numpy(np.concatenate(all_images)),
        torch.from_numpy(np.concatenate(all_labels)),
        name=name,
    )


def split_holdout(dataset: LabeledDataset, fraction: float, seed: int):
    """Deterministic seeded partition into (rest, holdout).

    The union preserves every sample and the intersection is empty; both
    splits keep the permuted order so repeated calls with one seed agree.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    n_hold = int(round(n * fraction))
    if n_hold == 0 or n_hold == n:
        raise ValueError(f"fraction {fraction} leaves an empty split for n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(perm[n_hold:]), dataset.subset(perm[:n_hold])
