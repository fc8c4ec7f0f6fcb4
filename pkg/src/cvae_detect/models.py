"""Target classifiers and the per-class conditional VAE, plus training loops.

The conditional VAE keeps ten fully independent encoder/decoder weight sets,
one per class; the condition selects the weight set rather than entering as
an input feature. Training a class therefore never touches another class's
parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import LabeledDataset, NUM_CLASSES
from .errors import CheckpointError, TrainingDivergenceError

Z_DIM = 128

CHECKPOINT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# classifier architectures
# ---------------------------------------------------------------------------


class SmallCnn(nn.Module):
    """4-layer conv net; the fast profile for CI and desk-scale runs."""

    def __init__(self, in_channels=1, num_classes=NUM_CLASSES):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 32, 3, padding=1),
            nn.BatchNorm2d(32),
            nn.ReLU(),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1),
            nn.BatchNorm2d(128),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(128, 128, 3, padding=1),
            nn.BatchNorm2d(128),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.head = nn.Linear(128 * 4 * 4, num_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """ResNet-18 with the 3x3 stem used for 32x32 inputs."""

    def __init__(self, in_channels=3, num_classes=NUM_CLASSES):
        super().__init__()
        self.in_planes = 64
        self.conv1 = nn.Conv2d(in_channels, 64, 3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.layer1 = self._make_layer(64, 2, 1)
        self.layer2 = self._make_layer(128, 2, 2)
        self.layer3 = self._make_layer(256, 2, 2)
        self.layer4 = self._make_layer(512, 2, 2)
        self.head = nn.Linear(512, num_classes)

    def _make_layer(self, planes, blocks, stride):
        layers = []
        for s in [stride] + [1] * (blocks - 1):
            layers.append(BasicBlock(self.in_planes, planes, s))
            self.in_planes = planes
        return nn.Sequential(*layers)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.head(out)


CLASSIFIER_PROFILES = {"small_cnn": SmallCnn, "resnet18": ResNet18}


def build_classifier(profile: str, in_channels: int) -> nn.Module:
    if profile not in CLASSIFIER_PROFILES:
        raise ValueError(f"unknown classifier profile {profile!r}, expected one of {sorted(CLASSIFIER_PROFILES)}")
    model = CLASSIFIER_PROFILES[profile](in_channels=in_channels)
    model.arch_id = profile
    model.arch_kwargs = {"in_channels": in_channels}
    return model


def classifier_forward(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Logits of shape (n, 10); differentiable w.r.t. x."""
    if x.ndim != 4:
        raise ValueError(f"expected (n, c, h, w) batch, got shape {tuple(x.shape)}")
    return model(x)


def classifier_predict(model: nn.Module, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    """Argmax class ids; ties break toward the smaller class index."""
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            logits = classifier_forward(model, x[start : start + batch_size])
            # np.argmax guarantees first-occurrence tie-breaking
            preds.append(np.argmax(logits.cpu().numpy(), axis=1))
    return torch.from_numpy(np.concatenate(preds)).to(torch.int64)


# ---------------------------------------------------------------------------
# conditional VAE (one encoder/decoder weight set per class)
# ---------------------------------------------------------------------------


class ConvEncoder(nn.Module):
    """Three stride-2 convs to a 4x-downsampled map, then linear mu/logvar heads.

    The flatten width is computed from the actual conv output rather than
    hard-coded, so toy input sizes work for gradient checks.
    """

    def __init__(self, in_channels, image_size=32, widths=(32, 64, 128), z_dim=Z_DIM):
        super().__init__()
        if image_size % 8:
            raise ValueError(f"image_size must be divisible by 8, got {image_size}")
        w1, w2, w3 = widths
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, w1, 4, stride=2, padding=1),
            nn.BatchNorm2d(w1),
            nn.ReLU(),
            nn.Conv2d(w1, w2, 4, stride=2, padding=1),
            nn.BatchNorm2d(w2),
            nn.ReLU(),
            nn.Conv2d(w2, w3, 4, stride=2, padding=1),
            nn.BatchNorm2d(w3),
        )
        self.flat_dim = w3 * (image_size // 8) ** 2
        self.fc_mu = nn.Linear(self.flat_dim, z_dim)
        self.fc_logvar = nn.Linear(self.flat_dim, z_dim)

    def forward(self, x):
        h = self.conv(x).flatten(1)
        return self.fc_mu(h), self.fc_logvar(h)


class ConvDecoder(nn.Module):
    """Mirror of the encoder: linear projection, then three stride-2 transpose convs."""

    def __init__(self, out_channels, image_size=32, widths=(32, 64, 128), z_dim=Z_DIM):
        super().__init__()
        w1, w2, w3 = widths
        self.bottom = image_size // 8
        self.w3 = w3
        self.fc = nn.Linear(z_dim, w3 * self.bottom**2)
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(w3, w2, 4, stride=2, padding=1),
            nn.BatchNorm2d(w2),
            nn.ReLU(),
            nn.ConvTranspose2d(w2, w1, 4, stride=2, padding=1),
            nn.BatchNorm2d(w1),
            nn.ReLU(),
            nn.ConvTranspose2d(w1, out_channels, 4, stride=2, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, z):
        h = self.fc(z).view(-1, self.w3, self.bottom, self.bottom)
        return self.deconv(h)


class ClassConditionalVae(nn.Module):
    """Ten independent encoder/decoder pairs selected by the class condition."""

    def __init__(self, in_channels, image_size=32, widths=(32, 64, 128), z_dim=Z_DIM,
                 num_classes=NUM_CLASSES):
        super().__init__()
        self.z_dim = z_dim
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.image_size = image_size
        self.encoders = nn.ModuleList(
            [ConvEncoder(in_channels, image_size, widths, z_dim) for _ in range(num_classes)]
        )
        self.decoders = nn.ModuleList(
            [ConvDecoder(in_channels, image_size, widths, z_dim) for _ in range(num_classes)]
        )
        self.arch_id = "cvae_per_class"
        self.arch_kwargs = {
            "in_channels": in_channels,
            "image_size": image_size,
            "widths": list(widths),
            "z_dim": z_dim,
            "num_classes": num_classes,
        }

    def _check_cond(self, cond: int):
        if not 0 <= int(cond) < self.num_classes:
            raise ValueError(f"condition {cond} outside 0..{self.num_classes - 1}")

    def encode(self, x, cond: int):
        """(mu, logvar) for a batch, all conditioned on one class id."""
        self._check_cond(cond)
        return self.encoders[int(cond)](x)

    def decode(self, z, cond: int):
        self._check_cond(cond)
        if z.shape[-1] != self.z_dim:
            raise ValueError(f"latent dim {z.shape[-1]} != z_dim {self.z_dim}")
        return self.decoders[int(cond)](z)

    def reconstruct(self, x, conds: torch.Tensor) -> torch.Tensor:
        """Deterministic mean-path reconstruction with a per-sample condition.

        Samples are grouped by condition so each group runs through its own
        weight set; gradients flow back to x.
        """
        conds = torch.as_tensor(conds, dtype=torch.int64)
        if conds.ndim == 0:
            conds = conds.expand(len(x))
        out = x.new_zeros(x.shape)
        for c in conds.unique().tolist():
            idx = (conds == c).nonzero(as_tuple=True)[0]
            mu, _ = self.encode(x[idx], c)
            out = out.index_copy(0, idx, self.decode(mu, c))
        return out


def reparameterize(mu, logvar, generator=None):
    """z = mu + exp(logvar / 2) * eta with eta ~ N(0, I)."""
    std = torch.exp(0.5 * logvar)
    eta = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + std * eta


def kl_divergence(mu, logvar):
    """Per-sample KL(q || N(0, I)) = 1/2 sum_j (var + mu^2 - 1 - logvar); >= 0."""
    return 0.5 * torch.sum(logvar.exp() + mu.pow(2) - 1.0 - logvar, dim=1)


def cvae_loss(model: ClassConditionalVae, x, cond: int, generator=None):
    """Pixel-summed BCE reconstruction loss plus KL, averaged over the batch."""
    mu, logvar = model.encode(x, cond)
    z = reparameterize(mu, logvar, generator)
    x_rcn = model.decode(z, cond)
    bce = F.binary_cross_entropy(x_rcn, x, reduction="sum") / len(x)
    kl = kl_divergence(mu, logvar).mean()
    return bce + kl


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    device: str = "cpu"
    log_every: int = 0  # batches between progress prints; 0 = silent

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must all be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def _make_optimizer(params, config: TrainConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.lr)
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.lr, momentum=0.9)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


def _batch_order(n, batch_size, generator):
    perm = torch.randperm(n, generator=generator)
    return [perm[s : s + batch_size] for s in range(0, n, batch_size)]


def train_classifier(dataset: LabeledDataset, config: TrainConfig,
                     profile: str = "small_cnn") -> nn.Module:
    """Cross-entropy training of the target classifier; returns the eval-mode model."""
    torch.manual_seed(config.seed)
    model = build_classifier(profile, in_channels=dataset.channels).to(config.device)
    opt = _make_optimizer(model.parameters(), config)
    shuffler = torch.Generator().manual_seed(config.seed)
    images = dataset.images.to(config.device)
    labels = dataset.labels.to(config.device)

    model.train()
    for epoch in range(config.epochs):
        running, seen = 0.0, 0
        for i, idx in enumerate(_batch_order(len(dataset), config.batch_size, shuffler)):
            opt.zero_grad()
            loss = F.cross_entropy(model(images[idx]), labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(
                    f"classifier loss became non-finite at epoch {epoch}", epoch=epoch
                )
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
            seen += len(idx)
            if config.log_every and (i + 1) % config.log_every == 0:
                print(f"[classifier] epoch {epoch} batch {i + 1} loss {running / seen:.4f}")
        if config.log_every:
            print(f"[classifier] epoch {epoch} mean loss {running / seen:.4f}")
    model.eval()
    return model


def train_cvae(dataset: LabeledDataset, config: TrainConfig, z_dim: int = Z_DIM,
               image_size: int = 32, widths=(32, 64, 128)) -> ClassConditionalVae:
    """Train the ten per-class encoder/decoder pairs on clean labeled data.

    Each class's weight set only ever sees samples of its own ground-truth
    class, so the per-class isolation invariant holds by construction.
    """
    torch.manual_seed(config.seed)
    model = ClassConditionalVae(
        dataset.channels, image_size=image_size, widths=widths, z_dim=z_dim
    ).to(config.device)
    images = dataset.images.to(config.device)
    labels = dataset.labels

    for c in range(model.num_classes):
        cls_idx = (labels == c).nonzero(as_tuple=True)[0]
        if len(cls_idx) == 0:
            continue
        cls_images = images[cls_idx]
        params = list(model.encoders[c].parameters()) + list(model.decoders[c].parameters())
        opt = _make_optimizer(params, config)
        gen = torch.Generator().manual_seed(config.seed * NUM_CLASSES + c)
        model.encoders[c].train()
        model.decoders[c].train()
        for epoch in range(config.epochs):
            running, seen = 0.0, 0
            for idx in _batch_order(len(cls_images), config.batch_size, gen):
                opt.zero_grad()
                loss = cvae_loss(model, cls_images[idx], c, generator=gen)
                if not torch.isfinite(loss):
                    raise TrainingDivergenceError(
                        f"cvae loss for class {c} became non-finite at epoch {epoch}",
                        epoch=epoch,
                    )
                loss.backward()
                opt.step()
                running += loss.item() * len(idx)
                seen += len(idx)
            if config.log_every:
                print(f"[cvae c={c}] epoch {epoch} mean loss {running / seen:.2f}")
        model.encoders[c].eval()
        model.decoders[c].eval()
    model.eval()
    return model


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(model: nn.Module, path, dataset_tag: str, seed: int | None = None,
                    extra: dict | None = None) -> Path:
    """Persist weights plus a JSON sidecar with architecture and dataset metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": model.arch_id,
        "arch_kwargs": model.arch_kwargs,
        "dataset": dataset_tag,
        "seed": seed,
    }
    if extra:
        meta.update(extra)
    torch.save({"meta": meta, "state_dict": model.state_dict()}, path)
    _sidecar_path(path).write_text(json.dumps(meta, indent=2))
    return path


def load_checkpoint(path, expect_dataset: str | None = None):
    """Rebuild the model from a checkpoint; returns (model, meta).

    Rejects checkpoints whose dataset tag or architecture does not match the
    caller's expectation, and wraps unreadable files in CheckpointError.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
        meta = payload["meta"]
        state = payload["state_dict"]
    except Exception as exc:  # torch raises a zoo of types on corrupt files
        raise CheckpointError(f"checkpoint {path} is unreadable: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format_version {meta.get('format_version')}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    if expect_dataset is not None and meta["dataset"] != expect_dataset:
        raise CheckpointError(
            f"checkpoint {path} was trained on {meta['dataset']!r}, run expects {expect_dataset!r}"
        )
    arch, kwargs = meta["architecture"], dict(meta["arch_kwargs"])
    if arch == "cvae_per_class":
        kwargs["widths"] = tuple(kwargs["widths"])
        model = ClassConditionalVae(**kwargs)
    elif arch in CLASSIFIER_PROFILES:
        model = build_classifier(arch, **kwargs)
    else:
        raise CheckpointError(f"checkpoint {path} has unknown architecture {arch!r}")
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} state dict mismatch: {exc}") from exc
    model.arch_id = arch
    model.arch_kwargs = meta["arch_kwargs"]
    model.eval()
    return model, meta
