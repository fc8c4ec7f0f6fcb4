"""Scikit-learn style estimator wrappers around the torch core.

TargetClassifier is an ordinary fit/predict image classifier. The detector is
a meta-estimator: it takes a fitted classifier, learns the per-class CVAE and
the clean reference distribution in fit, and exposes p-values through
score_samples so the outputs compose with sklearn.metrics directly.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .datasets import LabeledDataset
from .detector import build_reference, detect, p_value, recon_distance
from .models import TrainConfig, classifier_predict, train_classifier, train_cvae
from .validation import as_image_batch, as_labels


class TargetClassifier(BaseEstimator, ClassifierMixin):
    """Image classifier over (n, c, h, w) batches with pixels in [0, 1].

    Parameters
    ----------
    profile : "small_cnn" or "resnet18"
    epochs, batch_size, lr, seed, device : training hyperparameters
    """

    def __init__(self, profile="small_cnn", epochs=20, batch_size=128, lr=1e-3,
                 seed=0, device="cpu"):
        self.profile = profile
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.device = device

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            seed=self.seed, device=self.device,
        )

    def fit(self, X, y):
        X = as_image_batch(X)
        y = as_labels(y, len(X))
        dataset = LabeledDataset(X, y, name="fit")
        self.model_ = train_classifier(dataset, self._train_config(), profile=self.profile)
        self.classes_ = np.arange(10)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("TargetClassifier is not fitted; call fit first")

    def decision_function(self, X):
        self._check_fitted()
        X = as_image_batch(X)
        self.model_.eval()
        with torch.no_grad():
            return self.model_(X).numpy()

    def predict(self, X):
        self._check_fitted()
        return classifier_predict(self.model_, as_image_batch(X)).numpy()


class CvaeAdversarialDetector(BaseEstimator):
    """Adversary detector: fit on clean labeled data, score by p-value.

    fit trains one encoder/decoder pair per class and freezes the sorted
    reconstruction distances of the clean training set as the empirical null.
    score_samples returns the permutation-test p-value of each sample
    (small = likely adversarial); predict flags p <= threshold.

    Parameters
    ----------
    classifier : fitted TargetClassifier supplying the condition at inference
    z_dim, epochs, batch_size, lr, seed, device : CVAE hyperparameters
    threshold : p-value cutoff used by predict
    """

    def __init__(self, classifier=None, z_dim=128, cvae_widths=(32, 64, 128),
                 epochs=20, batch_size=128, lr=1e-3, threshold=0.05, seed=0,
                 device="cpu"):
        self.classifier = classifier
        self.z_dim = z_dim
        self.cvae_widths = cvae_widths
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.threshold = threshold
        self.seed = seed
        self.device = device

    def fit(self, X, y):
        if self.classifier is None or not hasattr(self.classifier, "model_"):
            raise ValueError("classifier must be a fitted TargetClassifier")
        X = as_image_batch(X)
        y = as_labels(y, len(X))
        dataset = LabeledDataset(X, y, name="fit")
        config = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            seed=self.seed, device=self.device,
        )
        self.cvae_ = train_cvae(dataset, config, z_dim=self.z_dim,
                                image_size=X.shape[-1], widths=tuple(self.cvae_widths))
        self.reference_ = build_reference(self.cvae_, dataset)
        return self

    def _check_fitted(self):
        if not hasattr(self, "reference_"):
            raise NotFittedError("CvaeAdversarialDetector is not fitted; call fit first")

    def score_samples(self, X):
        """Permutation-test p-value per sample; small means adversarial."""
        self._check_fitted()
        X = as_image_batch(X)
        with torch.no_grad():
            y_pred = classifier_predict(self.classifier.model_, X)
            dists = recon_distance(self.cvae_, X, y_pred).numpy()
        return np.atleast_1d(p_value(dists, self.reference_))

    def decision_function(self, X):
        """Signed margin above the flagging threshold (negative = flagged)."""
        return self.score_samples(X) - self.threshold

    def predict(self, X):
        """Boolean mask: True where the sample is flagged as an adversary."""
        self._check_fitted()
        result = detect(
            self.classifier.model_, self.cvae_, self.reference_,
            as_image_batch(X), self.threshold,
        )
        return result.flagged
