"""IDX/CIFAR binary parsing, canonicalization, and the holdout split."""

import gzip
import struct

import numpy as np
import pytest
import torch

from cvae_detect.datasets import (
    LabeledDataset,
    load_cifar10,
    load_mnist,
    split_holdout,
)
from cvae_detect.errors import DataConsistencyError, DataFormatError


def write_idx_images(path, images):
    """Independent minimal IDX writer (the format oracle for round-trips)."""
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    path.write_bytes(struct.pack(">IIII", 0x00000803, n, h, w) + images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    path.write_bytes(struct.pack(">II", 0x00000801, len(labels)) + labels.tobytes())


def read_idx_images_oracle(path):
    """Second, independent IDX reader used to cross-check load_mnist."""
    raw = path.read_bytes()
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    assert magic == 0x00000803
    return np.frombuffer(raw[16:], dtype=np.uint8).reshape(n, h, w)


@pytest.fixture
def mnist_files(tmp_path):
    rng = np.random.default_rng(5)
    images = rng.integers(0, 256, size=(7, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=7, dtype=np.uint8)
    img_path, lbl_path = tmp_path / "imgs", tmp_path / "lbls"
    write_idx_images(img_path, images)
    write_idx_labels(lbl_path, labels)
    return img_path, lbl_path, images, labels


def test_load_mnist_matches_independent_reader(mnist_files):
    img_path, lbl_path, images, labels = mnist_files
    ds = load_mnist(img_path, lbl_path)
    oracle = read_idx_images_oracle(img_path).astype(np.float32) / 255.0
    assert ds.images.shape == (7, 1, 32, 32)
    # padded interior must equal the oracle's pixels, border must be zero
    inner = ds.images[:, 0, 2:30, 2:30].numpy()
    np.testing.assert_array_equal(inner, oracle)
    assert ds.images[:, :, :2, :].abs().sum() == 0
    assert ds.images[:, :, :, 30:].abs().sum() == 0
    np.testing.assert_array_equal(ds.labels.numpy(), labels)
    # pin the affine endpoints: byte 255 -> 1.0, byte 0 -> 0.0
    assert ds.images.max() == pytest.approx(images.max() / 255.0)
    flat_sum = float(ds.images[0].sum())
    assert flat_sum == pytest.approx(float(oracle[0].sum()), rel=1e-6)


def test_load_mnist_gzip_transparent(mnist_files, tmp_path):
    img_path, lbl_path, _, _ = mnist_files
    gz_img = tmp_path / "imgs.gz"
    gz_lbl = tmp_path / "lbls.gz"
    gz_img.write_bytes(gzip.compress(img_path.read_bytes()))
    gz_lbl.write_bytes(gzip.compress(lbl_path.read_bytes()))
    plain = load_mnist(img_path, lbl_path)
    zipped = load_mnist(gz_img, gz_lbl)
    assert torch.equal(plain.images, zipped.images)
    assert torch.equal(plain.labels, zipped.labels)


def test_load_mnist_is_order_deterministic(mnist_files):
    img_path, lbl_path, _, _ = mnist_files
    a = load_mnist(img_path, lbl_path)
    b = load_mnist(img_path, lbl_path)
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)


def test_load_mnist_bad_magic_names_offset(mnist_files, tmp_path):
    img_path, lbl_path, _, _ = mnist_files
    bad = tmp_path / "bad"
    raw = bytearray(img_path.read_bytes())
    raw[0] = 0xFF
    bad.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError, match="byte 0"):
        load_mnist(bad, lbl_path)


def test_load_mnist_truncated_names_offset(mnist_files, tmp_path):
    img_path, lbl_path, _, _ = mnist_files
    trunc = tmp_path / "trunc"
    raw = img_path.read_bytes()
    trunc.write_bytes(raw[: len(raw) - 10])
    with pytest.raises(DataFormatError, match=f"byte {len(raw) - 10}"):
        load_mnist(trunc, lbl_path)


def test_load_mnist_count_mismatch(mnist_files, tmp_path):
    img_path, _, _, _ = mnist_files
    lbl_path = tmp_path / "short_labels"
    write_idx_labels(lbl_path, np.zeros(3, dtype=np.uint8))
    with pytest.raises(DataConsistencyError):
        load_mnist(img_path, lbl_path)


def make_cifar_batch(path, n, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=(n, 1), dtype=np.uint8)
    pixels = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
    path.write_bytes(np.concatenate([labels, pixels], axis=1).tobytes())
    return labels[:, 0], pixels


def test_load_cifar10_decodes_records(tmp_path):
    path = tmp_path / "batch.bin"
    labels, pixels = make_cifar_batch(path, 5, seed=9)
    ds = load_cifar10([path])
    assert ds.images.shape == (5, 3, 32, 32)
    np.testing.assert_array_equal(ds.labels.numpy(), labels)
    expected = pixels.reshape(5, 3, 32, 32).astype(np.float32) / 255.0
    np.testing.assert_allclose(ds.images.numpy(), expected)
    assert 0.0 <= ds.images.min() and ds.images.max() <= 1.0


def test_load_cifar10_roundtrip_bytes(tmp_path):
    """Decoding then re-encoding a record reproduces the original bytes."""
    path = tmp_path / "batch.bin"
    make_cifar_batch(path, 3, seed=1)
    ds = load_cifar10([path])
    re_encoded = np.concatenate(
        [
            ds.labels.numpy().astype(np.uint8)[:, None],
            np.round(ds.images.numpy() * 255.0).astype(np.uint8).reshape(3, -1),
        ],
        axis=1,
    ).tobytes()
    assert re_encoded == path.read_bytes()


def test_load_cifar10_concatenates_batches(tmp_path):
    paths = []
    for i in range(3):
        p = tmp_path / f"b{i}.bin"
        make_cifar_batch(p, 4, seed=i)
        paths.append(p)
    ds = load_cifar10(paths)
    assert len(ds) == 12


def test_load_cifar10_bad_length(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 3072)  # one byte short of a record
    with pytest.raises(DataFormatError, match="3073"):
        load_cifar10([path])


def test_load_cifar10_bad_label(tmp_path):
    path = tmp_path / "bad.bin"
    record = bytes([11]) + b"\x00" * 3072
    path.write_bytes(record)
    with pytest.raises(DataFormatError, match="label byte 11"):
        load_cifar10([path])


def make_dataset(n):
    images = torch.rand(n, 1, 32, 32)
    labels = torch.arange(n, dtype=torch.int64) % 10
    return LabeledDataset(images, labels)


def test_split_holdout_sizes_and_partition():
    ds = make_dataset(100)
    rest, hold = split_holdout(ds, 0.1, seed=7)
    assert (len(rest), len(hold)) == (90, 10)
    combined = torch.cat([rest.images, hold.images]).view(100, -1)
    original = ds.images.view(100, -1)
    # union preserves all samples (as multisets of rows), intersection empty
    combined_sorted = combined[np.lexsort(combined.numpy().T[::-1])]
    original_sorted = original[np.lexsort(original.numpy().T[::-1])]
    assert torch.equal(combined_sorted, original_sorted)


def test_split_holdout_deterministic():
    ds = make_dataset(60)
    a = split_holdout(ds, 0.25, seed=3)
    b = split_holdout(ds, 0.25, seed=3)
    assert torch.equal(a[0].images, b[0].images)
    assert torch.equal(a[1].images, b[1].images)


def test_split_holdout_seed_changes_partition():
    ds = make_dataset(60)
    _, hold_a = split_holdout(ds, 0.25, seed=3)
    _, hold_b = split_holdout(ds, 0.25, seed=4)
    assert not torch.equal(hold_a.images, hold_b.images)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.5, 0.001])
def test_split_holdout_rejects_degenerate(fraction):
    ds = make_dataset(20)
    with pytest.raises(ValueError):
        split_holdout(ds, fraction, seed=0)


def test_labeled_dataset_rejects_count_mismatch():
    with pytest.raises(DataConsistencyError):
        LabeledDataset(torch.rand(4, 1, 32, 32), torch.zeros(3, dtype=torch.int64))
