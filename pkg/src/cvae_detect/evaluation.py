"""ROC/AUC, error rates, robust-detection-risk bounds, and report serialization.

Convention: the adversary is the positive class and a sample is predicted
positive when its p-value is <= the sweep threshold. TPR is computed over
successful adversaries only; clean-side p-values must come from data never
used to build the reference.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .attacks import AttackResult
from .datasets import LabeledDataset
from .models import classifier_predict

_trapezoid = getattr(np, "trapezoid", None) or np.trapz  # renamed in numpy 2.0


def error_rate(cls_model, dataset: LabeledDataset, batch_size: int = 512) -> float:
    """Fraction of samples whose predicted class differs from the true label."""
    pred = classifier_predict(cls_model, dataset.images, batch_size=batch_size)
    return float((pred != dataset.labels).to(torch.float64).mean())


def filter_successful(result: AttackResult, y_true=None) -> np.ndarray:
    """Indices of samples the attack actually fooled (success mask true)."""
    return result.success.numpy().nonzero()[0]


@dataclass
class RocCurve:
    thresholds: np.ndarray  # ascending sweep over p-value cutoffs
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "fpr", "tpr"])
            for t, f_, t_ in zip(self.thresholds, self.fpr, self.tpr):
                writer.writerow([f"{t:.8g}", f"{f_:.8g}", f"{t_:.8g}"])
        return path


def roc_curve(p_clean, p_adv) -> RocCurve:
    """Empirical ROC over every observed p-value plus the {0, 1} endpoints.

    AUC is the trapezoidal integral over the exact step points, which equals
    the Mann-Whitney pairwise statistic.
    """
    p_clean = np.asarray(p_clean, dtype=np.float64)
    p_adv = np.asarray(p_adv, dtype=np.float64)
    if len(p_clean) == 0 or len(p_adv) == 0:
        raise ValueError("both p-value arrays must be nonempty")
    thresholds = np.unique(np.concatenate([p_clean, p_adv, [0.0, 1.0]]))
    fpr = np.searchsorted(np.sort(p_clean), thresholds, side="right") / len(p_clean)
    tpr = np.searchsorted(np.sort(p_adv), thresholds, side="right") / len(p_adv)
    if fpr[0] > 0.0 or tpr[0] > 0.0:
        # mass sits exactly at the smallest threshold; anchor the flag-nothing
        # operating point so the polyline still runs from (0, 0) to (1, 1)
        thresholds = np.concatenate([[thresholds[0]], thresholds])
        fpr = np.concatenate([[0.0], fpr])
        tpr = np.concatenate([[0.0], tpr])
    auc = float(_trapezoid(tpr, fpr))
    return RocCurve(thresholds, fpr, tpr, auc)


def auc_oracle(p_clean, p_adv) -> float:
    """Brute-force Mann-Whitney AUC: P(p_adv < p_clean) + 0.5 * P(tie)."""
    p_clean = np.asarray(p_clean, dtype=np.float64)
    p_adv = np.asarray(p_adv, dtype=np.float64)
    if len(p_clean) == 0 or len(p_adv) == 0:
        raise ValueError("both p-value arrays must be nonempty")
    adv = p_adv[:, None]
    clean = p_clean[None, :]
    wins = (adv < clean).sum(dtype=np.float64)
    ties = (adv == clean).sum(dtype=np.float64)
    return float((wins + 0.5 * ties) / (len(p_adv) * len(p_clean)))


def robust_risk_upper(curve: RocCurve, e_normal: float) -> float:
    """min over sweep thresholds of FPR + FNR + E_normal, capped at 1."""
    bound = float(np.min(curve.fpr + (1.0 - curve.tpr) + e_normal))
    return min(bound, 1.0)


def histogram_export(values, bins, path, value_range=None) -> Path:
    """Write a (bin_left, bin_right, count) CSV with right-closed bins.

    Bin i counts left_i < v <= right_i; the first bin additionally includes
    v == left_0. Values outside [left_0, right_last] are dropped. An empty
    input produces a header-only file.
    """
    values = np.asarray(values, dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if len(values) == 0:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(["bin_left", "bin_right", "count"])
        return path
    if value_range is None:
        value_range = (float(values.min()), float(values.max()))
    lo, hi = value_range
    if not hi > lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    inside = (values >= lo) & (values <= hi)
    idx = np.searchsorted(edges, values[inside], side="left") - 1
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        for i in range(bins):
            writer.writerow([f"{edges[i]:.8g}", f"{edges[i + 1]:.8g}", int(counts[i])])
    return path


@dataclass
class AttackRow:
    """One report line, mirroring the statistics table's columns."""

    attack_id: str
    parameters: dict
    error_rate: float
    auc: float
    robust_risk_upper: float
    n_evaluated: int = 0
    n_successful: int = 0


@dataclass
class EvalReport:
    dataset: str
    e_normal: float
    rows: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def add_row(self, row: AttackRow):
        self.rows.append(row)

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "dataset": self.dataset,
            "e_normal": self.e_normal,
            "rows": [asdict(r) for r in self.rows],
            "extras": self.extras,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        return path

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["type", "error_rate", "parameters", "auc", "robust_risk_upper"])
            for r in self.rows:
                params = ";".join(f"{k}={v}" for k, v in r.parameters.items())
                writer.writerow([
                    r.attack_id,
                    f"{r.error_rate:.6g}",
                    params,
                    f"{r.auc:.6g}",
                    f"{r.robust_risk_upper:.6g}",
                ])
        return path

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        payload = json.loads(Path(path).read_text())
        report = cls(payload["dataset"], payload["e_normal"], extras=payload.get("extras", {}))
        for r in payload["rows"]:
            report.add_row(AttackRow(**r))
        return report
