"""Input validation helpers for the estimator-facing API.

Accept numpy arrays or torch tensors and normalize them to the canonical
containers: float32 image batches in [0, 1] and int64 label vectors.
"""

from __future__ import annotations

import numpy as np
import torch


def as_image_batch(X, name="X") -> torch.Tensor:
    """Coerce X to a float32 (n, c, h, w) tensor and validate the pixel range."""
    if isinstance(X, torch.Tensor):
        t = X.detach().to(torch.float32)
    else:
        t = torch.as_tensor(np.asarray(X), dtype=torch.float32)
    if t.ndim == 3:  # single-channel batches may arrive as (n, h, w)
        t = t[:, None, :, :]
    if t.ndim != 4:
        raise ValueError(f"{name} must be (n, c, h, w) or (n, h, w), got shape {tuple(t.shape)}")
    if len(t) == 0:
        raise ValueError(f"{name} is empty")
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains NaN/Inf")
    if t.min() < 0.0 or t.max() > 1.0:
        raise ValueError(
            f"{name} pixels must lie in [0, 1], got range "
            f"[{float(t.min()):.4g}, {float(t.max()):.4g}]"
        )
    return t


def as_labels(y, n, name="y") -> torch.Tensor:
    """Coerce y to an int64 vector of length n with values in 0..9."""
    if isinstance(y, torch.Tensor):
        t = y.detach().to(torch.int64)
    else:
        t = torch.as_tensor(np.asarray(y), dtype=torch.int64)
    if t.ndim != 1 or len(t) != n:
        raise ValueError(f"{name} must be a length-{n} vector, got shape {tuple(t.shape)}")
    if t.min() < 0 or t.max() > 9:
        raise ValueError(f"{name} labels must lie in 0..9")
    return t
