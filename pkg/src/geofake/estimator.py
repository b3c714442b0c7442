"""scikit-learn style wrapper around model construction, training and prediction."""
from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted

from . import models
from ._validation import check_images, check_labels
from .trainer import FitResult, ImageSet, TrainConfig, fit, predict_logits
from .transforms import TransformConfig


class ForgeryDetector(ClassifierMixin, BaseEstimator):
    """Real-vs-fake image classifier with a frozen backbone and a trained head.

    ``X`` is an N x H x W x 3 array (or a list of such images), uint8 or float
    in [0, 1]; ``y`` holds 0 for real and 1 for fake. Without explicit
    validation data, ``validation_fraction`` of the training set is held out
    (stratified) to drive checkpoint selection and plateau decay.

    After ``fit`` the estimator holds the best-validation-accuracy weights.
    """

    def __init__(self, family="cnn", scale="tiny", epochs=20, batch_size=32, lr=1e-4,
                 weight_decay=1e-5, patience=3, factor=0.5, min_lr=1e-7, monitor="val_loss",
                 validation_fraction=0.15, freeze_backbone=True, pretrained=True,
                 checkpoint_dir=None, seed=0):
        self.family = family
        self.scale = scale
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.monitor = monitor
        self.validation_fraction = validation_fraction
        self.freeze_backbone = freeze_backbone
        self.pretrained = pretrained
        self.checkpoint_dir = checkpoint_dir
        self.seed = seed

    def _model_spec(self) -> models.ModelSpec:
        return models.ModelSpec(family=self.family, scale=self.scale, freeze_backbone=self.freeze_backbone,
                                pretrained=self.pretrained, seed=self.seed)

    def _train_config(self, checkpoint_dir) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, patience=self.patience, factor=self.factor,
                           min_lr=self.min_lr, monitor=self.monitor, seed=self.seed,
                           checkpoint_dir=str(checkpoint_dir))

    def fit(self, X, y, X_val=None, y_val=None):
        images = check_images(X)
        labels = check_labels(y, len(images))
        if (X_val is None) != (y_val is None):
            raise ValueError("pass both X_val and y_val, or neither")
        if X_val is None:
            if not 0 < self.validation_fraction < 1:
                raise ValueError("validation_fraction must lie in (0, 1) when no validation set is given")
            idx_tr, idx_va = train_test_split(np.arange(len(images)), test_size=self.validation_fraction,
                                              stratify=labels, random_state=self.seed)
            train = ImageSet([images[i] for i in idx_tr], labels[idx_tr])
            val = ImageSet([images[i] for i in idx_va], labels[idx_va])
        else:
            val_images = check_images(X_val, "X_val")
            train = ImageSet(images, labels)
            val = ImageSet(val_images, check_labels(y_val, len(val_images), "y_val"))

        model = models.build(self._model_spec())
        if self.checkpoint_dir is None:
            with tempfile.TemporaryDirectory() as tmp:
                result = fit(model, train, val, self._train_config(tmp))
                best, _ = models.load_checkpoint(result.best_checkpoint, model.spec)
        else:
            result = fit(model, train, val, self._train_config(self.checkpoint_dir))
            best, _ = models.load_checkpoint(result.best_checkpoint, model.spec)

        self.model_: models.Classifier = best.eval()
        self.history_ = result.history
        self.checkpoint_epochs_ = result.checkpoint_writes
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = 1  # images are not tabular; kept for sklearn tooling
        return self

    def decision_function(self, X) -> np.ndarray:
        """Fake-minus-real logit per image."""
        logits = self._logits(X)
        return (logits[:, 1] - logits[:, 0]).numpy()

    def _logits(self, X) -> torch.Tensor:
        check_is_fitted(self, "model_")
        images = check_images(X)
        return predict_logits(self.model_, ImageSet(images, np.zeros(len(images), dtype=np.int64)),
                              TransformConfig(), batch_size=64)

    def predict_proba(self, X) -> np.ndarray:
        return models.predict_proba(self._logits(X)).numpy()

    def predict(self, X) -> np.ndarray:
        return self.classes_[self._logits(X).argmax(1).numpy()]

    def save(self, directory) -> Path:
        check_is_fitted(self, "model_")
        return models.save_checkpoint(self.model_, directory, epoch=len(self.history_) // 2,
                                      best_val_accuracy=max((r.accuracy for r in self.history_ if r.split == "val"),
                                                            default=float("nan")), seed=self.seed)


__all__ = ["ForgeryDetector", "FitResult"]
