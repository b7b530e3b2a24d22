"""Scikit-learn style wrappers around teacher/student training.

``fit(X, y, part)`` trains a teacher on ground truth and, with
``distill=True``, a student against it; the student becomes ``model_``.
Targets are ``(expr, va)`` with -1 / NaN marking missing labels.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.model_selection import train_test_split

from .config import TrainingConfig
from .datakit import ArrayDataset
from .losses import DistillationConfig, decode_va
from .metrics import PredictionSet, evaluate
from .models import FrameModelSpec, TemporalModelSpec, predict_outputs
from .trainer import TrainData, train_student, train_teacher
from .validation import (
    check_images,
    check_is_fitted,
    check_label_consistency,
    check_parts,
    check_sequences,
    check_targets,
)


class _MultitaskEstimator(BaseEstimator):
    _stage = ""

    def _check_X(self, X):
        raise NotImplementedError

    def _spec(self, X):
        raise NotImplementedError

    def _dataset(self, X, y, part, mask=None) -> ArrayDataset:
        X = self._check_X(X)
        expr, va = check_targets(y, X.shape[:1] if self._stage == "frame" else X.shape[:2])
        part = check_parts(part, len(X))
        check_label_consistency(expr, va, part)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != expr.shape:
                raise ValueError(f"mask has shape {mask.shape}, expected {expr.shape}")
        return ArrayDataset(X, expr, va, part, mask)

    def _configs(self):
        tcfg = TrainingConfig(
            learning_rate=self.learning_rate, max_epochs=self.max_epochs, patience=self.patience,
            per_part_batch_frame=self.batch_size, per_part_batch_sequence=self.batch_size,
            seed=self.seed, tasks=self.tasks, use_shared_annotations=self.use_shared_annotations,
            augment=self.augment,
        )
        dcfg = DistillationConfig(lambda_weight=self.lambda_weight, temperature=self.temperature,
                                  num_bins=self.num_bins)
        return tcfg, dcfg

    def fit(self, X, y, part, eval_set=None, mask=None):
        """``eval_set`` is ``(X_val, y_val, part_val)``; without it a stratified
        ``validation_fraction`` of the data is held out for early stopping."""
        train = self._dataset(X, y, part, mask)
        if eval_set is not None:
            val = self._dataset(*eval_set)
        else:
            idx_train, idx_val = train_test_split(np.arange(len(train)), test_size=self.validation_fraction,
                                                  stratify=train.part, random_state=self.seed)
            train, val = _subset(train, idx_train), _subset(train, idx_val)
        tcfg, dcfg = self._configs()
        data = TrainData(train, val)
        spec = self._spec(train.x)
        self.teacher_, teacher_record = train_teacher(self._stage, data, spec, tcfg, dcfg)
        self.records_ = {"teacher": teacher_record}
        self.model_ = self.teacher_
        if self.distill:
            self.model_, self.records_["student"] = train_student(self._stage, data, self.teacher_, tcfg, dcfg)
        return self

    def _outputs(self, X):
        check_is_fitted(self)
        out, feats = predict_outputs(self.model_, self._check_X(X))
        return out, feats

    def predict(self, X):
        """(expr class, (valence, arousal)) per frame."""
        out, _ = self._outputs(X)
        expr = out.expr_logits.argmax(dim=-1).numpy()
        va = decode_va(torch.softmax(out.va_logits.double(), dim=-1)).numpy()
        return expr, va

    def predict_proba(self, X) -> np.ndarray:
        """Expression class probabilities."""
        out, _ = self._outputs(X)
        return torch.softmax(out.expr_logits.double(), dim=-1).numpy()

    def transform(self, X) -> np.ndarray:
        """Penultimate features (frames) or recurrent states (sequences)."""
        _, feats = self._outputs(X)
        return feats.to(torch.float32).numpy()

    def evaluate(self, X, y, mask=None):
        X = self._check_X(X)
        shape = X.shape[:1] if self._stage == "frame" else X.shape[:2]
        expr, va = check_targets(y, shape)
        keep = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        expr_pred, va_pred = self.predict(X)
        return evaluate(PredictionSet(expr[keep], expr_pred[keep], va[keep], va_pred[keep]))

    def score(self, X, y, mask=None) -> float:
        """Selection score: expr challenge score plus mean VA CCC."""
        return self.evaluate(X, y, mask).selection_score()


def _subset(ds: ArrayDataset, idx) -> ArrayDataset:
    return ArrayDataset(ds.x[idx], ds.expr[idx], ds.va[idx], ds.part[idx], ds.mask[idx])


class FrameMultitaskEstimator(_MultitaskEstimator):
    """Conv frame model trained on (n, h, w) images in [0, 1]."""

    _stage = "frame"

    def __init__(self, backbone="toy_conv", feature_dim=64, width=8, num_bins=20, lambda_weight=0.6,
                 temperature=2.0, learning_rate=1e-4, max_epochs=40, patience=5, batch_size=8,
                 tasks=(1, 2, 3), distill=True, use_shared_annotations=True, augment=True,
                 validation_fraction=0.2, seed=0):
        self.backbone = backbone
        self.feature_dim = feature_dim
        self.width = width
        self.num_bins = num_bins
        self.lambda_weight = lambda_weight
        self.temperature = temperature
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.tasks = tasks
        self.distill = distill
        self.use_shared_annotations = use_shared_annotations
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _check_X(self, X):
        size = self.model_.spec.image_size if hasattr(self, "model_") else None
        return check_images(X, size)

    def _spec(self, X):
        return FrameModelSpec(backbone=self.backbone, feature_dim=self.feature_dim, num_bins=self.num_bins,
                              image_size=X.shape[1:], width=self.width)


class SequenceMultitaskEstimator(_MultitaskEstimator):
    """Bidirectional GRU trained on (k, L, d) per-frame feature sequences."""

    _stage = "temporal"

    def __init__(self, hidden_size=128, num_layers=1, num_bins=20, lambda_weight=0.6, temperature=2.0,
                 learning_rate=1e-4, max_epochs=40, patience=5, batch_size=4, tasks=(1, 2, 3), distill=True,
                 use_shared_annotations=True, validation_fraction=0.2, seed=0):
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.num_bins = num_bins
        self.lambda_weight = lambda_weight
        self.temperature = temperature
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.tasks = tasks
        self.distill = distill
        self.use_shared_annotations = use_shared_annotations
        self.validation_fraction = validation_fraction
        self.seed = seed

    augment = False  # raw feature sequences cannot be re-rendered

    def _check_X(self, X):
        dim = self.model_.spec.input_dim if hasattr(self, "model_") else None
        return check_sequences(X, dim)

    def _spec(self, X):
        return TemporalModelSpec(input_dim=X.shape[-1], hidden_size=self.hidden_size,
                                 num_layers=self.num_layers, num_bins=self.num_bins)
