"""Challenge metrics for expression classification and valence/arousal estimation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .losses import EXPR_NAMES, NUM_EXPR_CLASSES, ccc

EXPR_F1_WEIGHT = 0.67
EXPR_ACC_WEIGHT = 0.33


def _check_aligned(true, pred):
    true, pred = np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape or true.ndim != 1:
        raise ValueError(f"true/pred must be aligned 1-d sequences, got {true.shape} and {pred.shape}")
    if true.size == 0:
        raise ValueError("empty input")
    return true, pred


def confusion_matrix(true, pred, num_classes: int = NUM_EXPR_CLASSES) -> np.ndarray:
    true, pred = _check_aligned(true, pred)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def macro_f1(true, pred, num_classes: int = NUM_EXPR_CLASSES, average: str = "macro") -> float:
    """F1 over ``num_classes`` classes.

    Classes that are neither present nor predicted score 0 and still count
    towards the macro mean. ``average="weighted"`` weights by true support.
    """
    cm = confusion_matrix(true, pred, num_classes)
    tp = np.diag(cm).astype(float)
    pred_pos, support = cm.sum(axis=0), cm.sum(axis=1)
    denom = pred_pos + support
    f1 = np.divide(2 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    if average == "macro":
        return float(f1.mean())
    if average == "weighted":
        return float((f1 * support).sum() / support.sum())
    raise ValueError(f"unknown average {average!r}")


def accuracy(true, pred) -> float:
    true, pred = _check_aligned(true, pred)
    return float((true == pred).mean())


def expr_challenge_score(f1: float, acc: float) -> float:
    if not (0 <= f1 <= 1 and 0 <= acc <= 1):
        raise ValueError(f"f1 and accuracy must lie in [0, 1], got {f1}, {acc}")
    return EXPR_F1_WEIGHT * f1 + EXPR_ACC_WEIGHT * acc


@dataclass
class PredictionSet:
    """Frame-aligned truth and predictions. Missing truth: expr -1, VA NaN."""

    expr_true: np.ndarray
    expr_pred: np.ndarray
    va_true: np.ndarray
    va_pred: np.ndarray
    frame_ids: list | None = None

    def __post_init__(self):
        self.expr_true = np.asarray(self.expr_true, dtype=np.int64)
        self.expr_pred = np.asarray(self.expr_pred, dtype=np.int64)
        self.va_true = np.asarray(self.va_true, dtype=np.float64).reshape(-1, 2)
        self.va_pred = np.asarray(self.va_pred, dtype=np.float64).reshape(-1, 2)
        n = len(self.expr_true)
        if not (len(self.expr_pred) == len(self.va_true) == len(self.va_pred) == n):
            raise ValueError("prediction set fields are not aligned")
        if self.frame_ids is not None and len(self.frame_ids) != n:
            raise ValueError("frame_ids not aligned with predictions")
        if ((self.expr_pred < 0) | (self.expr_pred >= NUM_EXPR_CLASSES)).any():
            raise ValueError("predicted class outside [0, 6]")
        if not np.isfinite(self.va_pred).all():
            raise ValueError("non-finite VA prediction")

    @classmethod
    def from_lists(cls, expr_true, expr_pred, va_true, va_pred, frame_ids=None) -> "PredictionSet":
        """Build from python lists where missing truth is ``None``."""
        et = [-1 if e is None else int(e) for e in expr_true]
        vt = [(math.nan, math.nan) if v is None else tuple(v) for v in va_true]
        return cls(np.array(et), np.asarray(expr_pred), np.array(vt, dtype=float).reshape(-1, 2),
                   np.asarray(va_pred, dtype=float), frame_ids)

    def __len__(self):
        return len(self.expr_true)


@dataclass
class MetricsReport:
    expr_score: float | None
    macro_f1: float | None
    total_accuracy: float | None
    valence_ccc: float | None
    arousal_ccc: float | None
    va_score: float | None
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def selection_score(self) -> float:
        """expr_score + mean CCC; a missing task contributes 0."""
        return (self.expr_score or 0.0) + (self.va_score or 0.0)


def evaluate(preds: PredictionSet, average: str = "macro", eps: float = 1e-8) -> MetricsReport:
    """Score every task for which at least one frame carries truth.

    VA metrics need two or more annotated frames.
    """
    has_expr = preds.expr_true >= 0
    has_va = ~np.isnan(preds.va_true).any(axis=1)
    if not has_expr.any() and has_va.sum() < 2:
        raise ValueError("no frames with usable truth for any task")
    fields = dict.fromkeys(("expr_score", "macro_f1", "total_accuracy", "valence_ccc", "arousal_ccc", "va_score"))
    counts = {}
    if has_expr.any():
        t, p = preds.expr_true[has_expr], preds.expr_pred[has_expr]
        f1, acc = macro_f1(t, p, average=average), accuracy(t, p)
        fields.update(macro_f1=f1, total_accuracy=acc, expr_score=expr_challenge_score(f1, acc))
        support = np.bincount(t, minlength=NUM_EXPR_CLASSES)
        counts = {name: int(c) for name, c in zip(EXPR_NAMES, support)}
    if has_va.sum() >= 2:
        vt = torch.as_tensor(preds.va_true[has_va])
        vp = torch.as_tensor(preds.va_pred[has_va])
        v = float(ccc(vt[:, 0], vp[:, 0], eps))
        a = float(ccc(vt[:, 1], vp[:, 1], eps))
        fields.update(valence_ccc=v, arousal_ccc=a, va_score=(v + a) / 2)
    return MetricsReport(counts=counts, **fields)
