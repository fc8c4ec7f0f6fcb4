"""Adversarial-example detection with per-class conditional VAEs.

Train a classifier and a per-class CVAE on clean images, perturb inputs with
random/grey-box/detector-aware attacks, score each sample's reconstruction
distance against the clean-train reference as a permutation-test p-value, and
report ROC/AUC and robust-detection-risk metrics.
"""

from ._version import __version__
from .attacks import (
    AttackConfig,
    AttackResult,
    CwParams,
    DfParams,
    attack_cw,
    attack_deepfool,
    attack_fgsm,
    attack_pgd,
    attack_random,
    attack_rfgsm,
    attack_whitebox_pgd,
    clip_to_ball,
    default_iterations,
    input_gradient,
    run_attack,
)
from .datasets import LabeledDataset, load_cifar10, load_mnist, split_holdout
from .detector import (
    DetectionResult,
    ReconReference,
    build_reference,
    detect,
    p_value,
    recon_distance,
)
from .estimators import CvaeAdversarialDetector, TargetClassifier
from .evaluation import (
    AttackRow,
    EvalReport,
    RocCurve,
    auc_oracle,
    error_rate,
    filter_successful,
    histogram_export,
    robust_risk_upper,
    roc_curve,
)
from .models import (
    ClassConditionalVae,
    TrainConfig,
    classifier_forward,
    classifier_predict,
    cvae_loss,
    kl_divergence,
    load_checkpoint,
    reparameterize,
    save_checkpoint,
    train_classifier,
    train_cvae,
)
from .pipeline import RunConfig, RunManifest, run_all, stage_seed

__all__ = [
    "__version__",
    "AttackConfig", "AttackResult", "CwParams", "DfParams",
    "attack_cw", "attack_deepfool", "attack_fgsm", "attack_pgd", "attack_random",
    "attack_rfgsm", "attack_whitebox_pgd", "clip_to_ball", "default_iterations",
    "input_gradient", "run_attack",
    "LabeledDataset", "load_cifar10", "load_mnist", "split_holdout",
    "DetectionResult", "ReconReference", "build_reference", "detect", "p_value",
    "recon_distance",
    "CvaeAdversarialDetector", "TargetClassifier",
    "AttackRow", "EvalReport", "RocCurve", "auc_oracle", "error_rate",
    "filter_successful", "histogram_export", "robust_risk_upper", "roc_curve",
    "ClassConditionalVae", "TrainConfig", "classifier_forward", "classifier_predict",
    "cvae_loss", "kl_divergence", "load_checkpoint", "reparameterize",
    "save_checkpoint", "train_classifier", "train_cvae",
    "RunConfig", "RunManifest", "run_all", "stage_seed",
]
