"""Reconstruction distances, the clean-train reference, and p-value detection.

The detector conditions the CVAE on the classifier's predicted class, measures
the squared-pixel reconstruction distance, and ranks it against the reference
distribution of clean training distances. Large distances map to small
p-values; a sample is flagged when p <= threshold.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .datasets import LabeledDataset
from .errors import NumericError
from .models import ClassConditionalVae, classifier_predict

MIN_REFERENCE_SIZE = 100  # below this, p-value granularity makes ROC curves meaningless


@dataclass(frozen=True)
class ReconReference:
    """Sorted clean-train reconstruction distances: the empirical null."""

    distances: np.ndarray
    meta: dict

    def __post_init__(self):
        d = np.asarray(self.distances, dtype=np.float64)
        if d.ndim != 1 or len(d) == 0:
            raise ValueError("reference must be a nonempty 1-d array")
        if not np.isfinite(d).all() or (d < 0).any():
            raise NumericError("reference distances must be finite and >= 0")
        object.__setattr__(self, "distances", np.sort(d))

    @property
    def n(self) -> int:
        return len(self.distances)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, self.distances)
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps({"n": self.n, **self.meta}, indent=2))
        return path if path.suffix == ".npy" else path.with_suffix(".npy")

    @classmethod
    def load(cls, path) -> "ReconReference":
        path = Path(path)
        distances = np.load(path if path.suffix == ".npy" else path.with_suffix(".npy"))
        meta = json.loads(path.with_suffix(".json").read_text())
        meta.pop("n", None)
        return cls(distances, meta)


def recon_distance(cvae: ClassConditionalVae, x: torch.Tensor, cond) -> torch.Tensor:
    """Per-sample sum over pixels of (x - x_rcn)^2, mean-path reconstruction.

    cond may be a single class id for the whole batch or one id per sample.
    """
    cvae.eval()
    x_rcn = cvae.reconstruct(x, torch.as_tensor(cond, dtype=torch.int64))
    return (x - x_rcn).flatten(1).pow(2).sum(dim=1)


def build_reference(cvae: ClassConditionalVae, train_dataset: LabeledDataset,
                    batch_size: int = 256) -> ReconReference:
    """Distances of the clean training set conditioned on ground-truth labels."""
    cvae.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(train_dataset), batch_size):
            x = train_dataset.images[start : start + batch_size]
            y = train_dataset.labels[start : start + batch_size]
            chunks.append(recon_distance(cvae, x, y).cpu().numpy())
    return ReconReference(
        np.concatenate(chunks),
        meta={"dataset": train_dataset.name, "cvae_arch": cvae.arch_id, "z_dim": cvae.z_dim},
    )


def p_value(d, ref: ReconReference):
    """Permutation-test plausibility of distance d under the reference.

    p = (#{ref >= d} + 1) / (N + 1), so a large distance yields a small p and
    the minimum attainable value is 1 / (N + 1), never 0. Accepts a scalar or
    an array of distances; computed by binary search on the sorted reference.
    """
    d_arr = np.asarray(d, dtype=np.float64)
    if np.isnan(d_arr).any():
        raise NumericError("NaN reconstruction distance")
    n = ref.n
    count_ge = n - np.searchsorted(ref.distances, d_arr, side="left")
    p = (count_ge + 1.0) / (n + 1.0)
    return float(p) if np.isscalar(d) or d_arr.ndim == 0 else p


@dataclass
class DetectionResult:
    """Per-sample detection output; columns align index-for-index."""

    recon_distances: np.ndarray
    p_values: np.ndarray
    predicted_classes: np.ndarray
    flagged: np.ndarray
    threshold: float

    def __len__(self):
        return len(self.p_values)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "y_pred", "recon_distance", "p_value", "flagged"])
            for i in range(len(self)):
                writer.writerow([
                    i,
                    int(self.predicted_classes[i]),
                    f"{self.recon_distances[i]:.8g}",
                    f"{self.p_values[i]:.8g}",
                    int(self.flagged[i]),
                ])
        return path


def detect(cls_model, cvae: ClassConditionalVae, ref: ReconReference, x: torch.Tensor,
           threshold: float, batch_size: int = 256) -> DetectionResult:
    """Flag samples whose reconstruction distance is implausibly large.

    Conditions the CVAE on the classifier's prediction, converts the distance
    to a p-value against the reference, and flags p <= threshold.
    """
    if ref is None:
        raise RuntimeError("no reference distribution; run build_reference first")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    if ref.n < MIN_REFERENCE_SIZE:
        raise ValueError(
            f"reference has {ref.n} samples; at least {MIN_REFERENCE_SIZE} are needed "
            "for meaningful p-values"
        )
    preds, dists = [], []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            xb = x[start : start + batch_size]
            y_pred = classifier_predict(cls_model, xb)
            preds.append(y_pred.numpy())
            dists.append(recon_distance(cvae, xb, y_pred).cpu().numpy())
    preds = np.concatenate(preds)
    dists = np.concatenate(dists)
    pvals = p_value(dists, ref)
    return DetectionResult(dists, pvals, preds, pvals <= threshold, threshold)
