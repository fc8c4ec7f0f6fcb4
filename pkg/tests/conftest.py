"""Shared fixtures: a small synthetic image task plus trained toy models.

The synthetic task has ten visually distinct classes (a bright patch whose
position encodes the class), so a small CNN learns it quickly and the
per-class CVAE reconstructs in-class samples much better than out-of-class
ones. It stands in for real data in structural tests; the paper-anchored
numbers are only asserted against real MNIST in the acceptance module.
"""

import struct

import numpy as np
import pytest
import torch

from cvae_detect.datasets import LabeledDataset
from cvae_detect.models import TrainConfig, train_classifier, train_cvae


def make_synthetic(n_per_class, seed=0, image_size=32, noise=0.08):
    """Ten-class patch-position dataset with mild pixel noise."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    patch = image_size // 4
    for c in range(10):
        row, col = divmod(c, 4)
        top = 2 + row * (patch + 1)
        left = 2 + col * (patch - 1)
        for _ in range(n_per_class):
            img = rng.uniform(0.0, noise, size=(image_size, image_size))
            jitter_r = rng.integers(-1, 2)
            jitter_c = rng.integers(-1, 2)
            r0 = np.clip(top + jitter_r, 0, image_size - patch)
            c0 = np.clip(left + jitter_c, 0, image_size - patch)
            img[r0 : r0 + patch, c0 : c0 + patch] = rng.uniform(0.75, 1.0, (patch, patch))
            images.append(img)
            labels.append(c)
    order = rng.permutation(len(images))
    x = np.asarray(images, dtype=np.float32)[order][:, None, :, :]
    y = np.asarray(labels, dtype=np.int64)[order]
    return LabeledDataset(torch.from_numpy(x), torch.from_numpy(y), name="synthetic")


def write_synthetic_mnist_dir(directory, n_train_per_class=30, n_test_per_class=12,
                              seed=100):
    """Write the synthetic task as MNIST-format IDX files for pipeline tests."""
    directory.mkdir(parents=True, exist_ok=True)

    def dump(ds, images_name, labels_name):
        imgs = np.round(ds.images.numpy()[:, 0] * 255.0).astype(np.uint8)
        n, h, w = imgs.shape
        (directory / images_name).write_bytes(
            struct.pack(">IIII", 0x00000803, n, h, w) + imgs.tobytes()
        )
        (directory / labels_name).write_bytes(
            struct.pack(">II", 0x00000801, n) + ds.labels.numpy().astype(np.uint8).tobytes()
        )

    dump(make_synthetic(n_train_per_class, seed=seed, image_size=28),
         "train-images-idx3-ubyte", "train-labels-idx1-ubyte")
    dump(make_synthetic(n_test_per_class, seed=seed + 1, image_size=28),
         "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    return directory


@pytest.fixture(scope="session")
def synth_train():
    return make_synthetic(40, seed=11)


@pytest.fixture(scope="session")
def synth_test():
    return make_synthetic(12, seed=22)


@pytest.fixture(scope="session")
def toy_classifier(synth_train):
    config = TrainConfig(epochs=6, batch_size=64, lr=1e-3, seed=3)
    return train_classifier(synth_train, config, profile="small_cnn")


@pytest.fixture(scope="session")
def toy_cvae(synth_train):
    config = TrainConfig(epochs=40, batch_size=32, lr=2e-3, seed=4)
    return train_cvae(synth_train, config, z_dim=16, widths=(8, 16, 16))


def central_difference_gradient(fn, x, h=1e-4):
    """Independent finite-difference oracle for d fn / d x, elementwise."""
    x = x.detach().clone().to(torch.float64)
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = float(fn(x))
            flat[i] = orig - h
            f_minus = float(fn(x))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    analytic = analytic.detach().to(torch.float64)
    numeric = numeric.detach().to(torch.float64)
    scale = torch.maximum(analytic.abs(), numeric.abs()).clamp(min=floor)
    return float(((analytic - numeric).abs() / scale).max())
