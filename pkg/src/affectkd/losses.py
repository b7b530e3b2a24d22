"""Losses for multitask teacher/student training with missing labels.

All functions take torch tensors and stay differentiable with respect to the
logits. Reductions follow one convention throughout: mean over the instances
of a dataset part, sum across parts, tasks and VA dimensions.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

NUM_EXPR_CLASSES = 7
EXPR_NAMES = ("neutral", "anger", "disgust", "fear", "happiness", "sadness", "surprise")
PROB_FLOOR = 1e-12
_LOG_FLOOR = math.log(PROB_FLOOR)


class TaskId(enum.IntEnum):
    """Training tasks. EXPR_VA has no head of its own; it reuses EXPR and VA."""

    EXPR = 1
    VA = 2
    EXPR_VA = 3


ALL_TASKS = (TaskId.EXPR, TaskId.VA, TaskId.EXPR_VA)


@dataclass(frozen=True)
class DistillationConfig:
    lambda_weight: float = 0.6
    temperature: float = 2.0
    num_bins: int = 20
    ccc_epsilon: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.lambda_weight <= 1.0:
            raise ValueError(f"lambda_weight must lie in [0, 1], got {self.lambda_weight}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if int(self.num_bins) != self.num_bins or self.num_bins < 2:
            raise ValueError(f"num_bins must be an integer >= 2, got {self.num_bins}")
        if not self.ccc_epsilon > 0:
            raise ValueError(f"ccc_epsilon must be positive, got {self.ccc_epsilon}")


@dataclass
class FrameModelOutput:
    """Batched head outputs: ``expr_logits`` (n, 7) and ``va_logits`` (n, 2, B).

    Row 0 of the VA block is valence, row 1 arousal.
    """

    expr_logits: torch.Tensor
    va_logits: torch.Tensor

    def __post_init__(self):
        if self.expr_logits.shape[-1] != NUM_EXPR_CLASSES:
            raise ValueError(f"expr_logits must end in {NUM_EXPR_CLASSES}, got {tuple(self.expr_logits.shape)}")
        if self.va_logits.dim() < 2 or self.va_logits.shape[-2] != 2:
            raise ValueError(f"va_logits must end in (2, B), got {tuple(self.va_logits.shape)}")
        if self.expr_logits.shape[:-1] != self.va_logits.shape[:-2]:
            raise ValueError("expr_logits and va_logits disagree on leading dimensions")

    @property
    def num_bins(self) -> int:
        return self.va_logits.shape[-1]

    def __len__(self):
        return self.expr_logits.shape[0]

    def __getitem__(self, idx) -> "FrameModelOutput":
        return FrameModelOutput(self.expr_logits[idx], self.va_logits[idx])

    def detach(self) -> "FrameModelOutput":
        return FrameModelOutput(self.expr_logits.detach(), self.va_logits.detach())

    def to(self, *args, **kwargs) -> "FrameModelOutput":
        return FrameModelOutput(self.expr_logits.to(*args, **kwargs), self.va_logits.to(*args, **kwargs))

    def flatten(self, mask: torch.Tensor | None = None) -> "FrameModelOutput":
        """Collapse leading dims (e.g. sequence batch x time) keeping rows where ``mask``."""
        expr = self.expr_logits.reshape(-1, NUM_EXPR_CLASSES)
        va = self.va_logits.reshape(-1, 2, self.num_bins)
        if mask is not None:
            keep = mask.reshape(-1)
            expr, va = expr[keep], va[keep]
        return FrameModelOutput(expr, va)


@dataclass
class Labels:
    """Per-instance ground truth with missing entries.

    ``expr`` holds class indices with -1 for "not annotated"; ``va`` holds
    (valence, arousal) rows with NaN for "not annotated".
    """

    expr: torch.Tensor
    va: torch.Tensor

    def __post_init__(self):
        if self.va.shape[:-1] != self.expr.shape or self.va.shape[-1:] != (2,):
            raise ValueError(f"label shapes disagree: expr {tuple(self.expr.shape)}, va {tuple(self.va.shape)}")

    @classmethod
    def from_arrays(cls, expr, va, dtype=torch.float64) -> "Labels":
        return cls(torch.as_tensor(expr, dtype=torch.long), torch.as_tensor(va, dtype=dtype))

    @property
    def has_expr(self) -> torch.Tensor:
        return self.expr >= 0

    @property
    def has_va(self) -> torch.Tensor:
        return ~torch.isnan(self.va).any(dim=-1)

    def has(self, task: TaskId) -> torch.Tensor:
        if task == TaskId.EXPR:
            return self.has_expr
        if task == TaskId.VA:
            return self.has_va
        return self.has_expr & self.has_va

    def validate(self):
        if ((self.expr < -1) | (self.expr >= NUM_EXPR_CLASSES)).any():
            raise ValueError("expression label outside [0, 6] (use -1 for a missing label)")
        half_missing = torch.isnan(self.va).any(dim=-1) != torch.isnan(self.va).all(dim=-1)
        if half_missing.any():
            raise ValueError("VA label with only one of valence/arousal present")
        if torch.isinf(self.va).any():
            raise ValueError("VA label is infinite")

    def __len__(self):
        return self.expr.shape[0]

    def __getitem__(self, idx) -> "Labels":
        return Labels(self.expr[idx], self.va[idx])

    def flatten(self, mask: torch.Tensor | None = None) -> "Labels":
        expr = self.expr.reshape(-1)
        va = self.va.reshape(-1, 2)
        if mask is not None:
            keep = mask.reshape(-1)
            expr, va = expr[keep], va[keep]
        return Labels(expr, va)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    per_task: dict = field(default_factory=dict)
    supervision_part: torch.Tensor | float = 0.0
    distillation_part: torch.Tensor | float = 0.0

    def as_dict(self) -> dict:
        f = lambda v: float(v.detach()) if torch.is_tensor(v) else float(v)  # noqa: E731
        return {
            "total": f(self.total),
            "per_task": {t.name: f(v) for t, v in self.per_task.items()},
            "supervision_part": f(self.supervision_part),
            "distillation_part": f(self.distillation_part),
        }


# ---------------------------------------------------------------------------
# primitives


def softmax_temperature(logits, T: float = 1.0) -> torch.Tensor:
    """Softmax of ``logits / T`` along the last axis."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    logits = _as_prob(logits)
    if logits.numel() == 0:
        raise ValueError("logits must be non-empty")
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    # torch.softmax shifts by the max internally
    return torch.softmax(logits / T, dim=-1)


def _as_prob(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def cross_entropy(target, predicted) -> torch.Tensor:
    """-sum(target * log(predicted)) with ``predicted`` floored at 1e-12."""
    target, predicted = _as_prob(target), _as_prob(predicted)
    if target.shape != predicted.shape:
        raise ValueError(f"length mismatch: {tuple(target.shape)} vs {tuple(predicted.shape)}")
    return -(target * torch.log(predicted.clamp_min(PROB_FLOOR))).sum(dim=-1)


def kl_divergence(p, q) -> torch.Tensor:
    """KL(p || q); entries with p == 0 contribute nothing, q floored at 1e-12."""
    p, q = _as_prob(p), _as_prob(q)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    return (torch.special.xlogy(p, p) - p * torch.log(q.clamp_min(PROB_FLOOR))).sum(dim=-1)


def ccc(truth, prediction, eps: float = 1e-8) -> torch.Tensor:
    """Concordance correlation coefficient with population moments."""
    truth, prediction = _as_prob(truth), _as_prob(prediction)
    if truth.dim() != 1 or truth.shape != prediction.shape:
        raise ValueError(f"ccc needs two equal-length series, got {tuple(truth.shape)} and {tuple(prediction.shape)}")
    if truth.shape[0] < 2:
        raise ValueError("ccc needs at least 2 points")
    mx, my = truth.mean(), prediction.mean()
    dx, dy = truth - mx, prediction - my
    cov = (dx * dy).mean()
    denom = (dx * dx).mean() + (dy * dy).mean() + (mx - my) ** 2 + eps
    return 2.0 * cov / denom


def va_bin_index(value, B: int) -> torch.Tensor:
    if B < 2:
        raise ValueError(f"bin count must be >= 2, got {B}")
    value = _as_prob(value).clamp(-1.0, 1.0)
    idx = torch.floor((value + 1.0) / 2.0 * B).long()
    return idx.clamp_max(B - 1)


def discretize_va(value, B: int) -> torch.Tensor:
    """One-hot over ``B`` uniform bins of [-1, 1]; the last bin is right-inclusive."""
    idx = va_bin_index(value, B)
    return torch.nn.functional.one_hot(idx, B).to(torch.float64)


def bin_centers(B: int, dtype=torch.float64) -> torch.Tensor:
    return -1.0 + (2.0 * torch.arange(B, dtype=dtype) + 1.0) / B


def decode_va(bin_probs) -> torch.Tensor:
    """Expected value of the bin centres under ``bin_probs`` (last axis)."""
    bin_probs = _as_prob(bin_probs)
    return bin_probs @ bin_centers(bin_probs.shape[-1], dtype=bin_probs.dtype)


# ---------------------------------------------------------------------------
# per-instance building blocks


def _log_probs(logits: torch.Tensor, T: float = 1.0) -> torch.Tensor:
    return torch.log_softmax(logits / T, dim=-1)


def _expr_ce(expr: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    logp = _log_probs(logits).clamp_min(_LOG_FLOOR)
    return -logp.gather(-1, expr.unsqueeze(-1)).squeeze(-1)


def _va_ce(va: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Bin cross entropy summed over valence and arousal, one value per instance."""
    idx = va_bin_index(va, logits.shape[-1])
    logp = _log_probs(logits).clamp_min(_LOG_FLOOR)
    return -logp.gather(-1, idx.unsqueeze(-1)).squeeze(-1).sum(dim=-1)


def _va_ccc_penalty(va: torch.Tensor, logits: torch.Tensor, eps: float) -> torch.Tensor:
    B = logits.shape[-1]
    decoded = decode_va(torch.softmax(logits, dim=-1))
    penalty = logits.new_zeros(())
    for d in range(2):
        penalty = penalty + (1.0 - ccc(va[:, d].to(decoded.dtype), decoded[:, d], eps)) / B
    return penalty


def _kl_logits(teacher: torch.Tensor, student: torch.Tensor, T: float) -> torch.Tensor:
    logp = _log_probs(teacher, T)
    logq = _log_probs(student, T).clamp_min(_LOG_FLOOR)
    return (logp.exp() * (logp - logq)).sum(dim=-1)


def distillation_per_instance(task: TaskId, teacher: FrameModelOutput, student: FrameModelOutput,
                              T: float) -> torch.Tensor:
    """Distillation term of every instance, shape (n,)."""
    task = TaskId(task)
    if len(teacher) != len(student):
        raise ValueError(f"teacher has {len(teacher)} instances, student {len(student)}")
    if teacher.num_bins != student.num_bins:
        raise ValueError("teacher and student use different bin counts")
    out = 0.0
    if task in (TaskId.EXPR, TaskId.EXPR_VA):
        out = out + _kl_logits(teacher.expr_logits, student.expr_logits, T)
    if task in (TaskId.VA, TaskId.EXPR_VA):
        out = out + _kl_logits(teacher.va_logits, student.va_logits, T).sum(dim=-1)
    return out


# ---------------------------------------------------------------------------
# task losses


def _require(labels: Labels, task: TaskId):
    if task in (TaskId.EXPR, TaskId.EXPR_VA) and not bool(labels.has_expr.all()):
        raise ValueError(f"task {task.name} requires an expression label on every instance")
    if task in (TaskId.VA, TaskId.EXPR_VA) and not bool(labels.has_va.all()):
        raise ValueError(f"task {task.name} requires a valence/arousal label on every instance")


def supervision_loss(task: TaskId, labels: Labels, outputs: FrameModelOutput,
                     cfg: DistillationConfig) -> torch.Tensor:
    task = TaskId(task)
    if len(labels) != len(outputs):
        raise ValueError(f"{len(labels)} labels for {len(outputs)} outputs")
    if len(labels) == 0:
        raise ValueError("empty batch")
    _require(labels, task)
    loss = outputs.expr_logits.new_zeros(())
    if task in (TaskId.EXPR, TaskId.EXPR_VA):
        loss = loss + _expr_ce(labels.expr, outputs.expr_logits).mean()
    if task in (TaskId.VA, TaskId.EXPR_VA):
        if len(labels) < 2:
            raise ValueError("VA supervision needs at least 2 instances (CCC is undefined otherwise)")
        loss = loss + _va_ce(labels.va, outputs.va_logits).mean()
        loss = loss + _va_ccc_penalty(labels.va, outputs.va_logits, cfg.ccc_epsilon)
    return loss


def distillation_loss(task: TaskId, teacher: FrameModelOutput, student: FrameModelOutput,
                      cfg: DistillationConfig) -> torch.Tensor:
    return distillation_per_instance(task, teacher, student, cfg.temperature).mean()


def combined_sample_loss(task: TaskId, labels: Labels, teacher_out: FrameModelOutput,
                         student_out: FrameModelOutput, cfg: DistillationConfig) -> torch.Tensor:
    lam = cfg.lambda_weight
    return (lam * supervision_loss(task, labels, student_out, cfg)
            + (1.0 - lam) * distillation_loss(task, teacher_out, student_out, cfg))


def _check_triplet(labels: Sequence[Labels], outputs: Sequence[FrameModelOutput]):
    if len(labels) != 3 or len(outputs) != 3:
        raise ValueError("a batch triplet needs exactly three parts")
    for i, (lab, out) in enumerate(zip(labels, outputs), start=1):
        if len(lab) == 0:
            raise ValueError(f"part {i} is empty")
        if len(lab) != len(out):
            raise ValueError(f"part {i}: {len(lab)} labels for {len(out)} outputs")


def teacher_batch_loss(labels: Sequence[Labels], outputs: Sequence[FrameModelOutput],
                       cfg: DistillationConfig, tasks=ALL_TASKS) -> LossBreakdown:
    """Ground-truth-only objective: supervision loss of each part on its own task.

    ``labels`` and ``outputs`` are indexed by part (0: mixed EXPR, 1: mixed VA,
    2: EXPR_VA). Dropping ``TaskId.EXPR_VA`` from ``tasks`` ignores part 3.
    """
    _check_triplet(labels, outputs)
    per_task = {}
    for task in ALL_TASKS:
        if task in tasks:
            per_task[task] = supervision_loss(task, labels[task - 1], outputs[task - 1], cfg)
    total = sum(per_task.values())
    return LossBreakdown(total=total, per_task=per_task, supervision_part=total,
                         distillation_part=total.new_zeros(()))


def _secondary_term(task: TaskId, labels: Labels, teacher: FrameModelOutput, student: FrameModelOutput,
                    cfg: DistillationConfig, use_shared: bool):
    """Secondary-task term of a single-task part: returns (supervision, distillation) pieces.

    Instances without the secondary label get pure distillation; with
    ``use_shared`` the annotated ones get the blended loss instead. The
    per-instance terms are averaged over the whole part, so the supervised
    piece is weighted by the annotated fraction.
    """
    present = labels.has(task) if use_shared else None
    if present is None or not bool(present.any()):
        return None, distillation_loss(task, teacher, student, cfg)
    lam = cfg.lambda_weight
    n, m = len(labels), int(present.sum())
    h = distillation_per_instance(task, teacher, student, cfg.temperature)
    weights = torch.where(present, torch.full_like(h, 1.0 - lam), torch.ones_like(h))
    dist = (weights * h).mean()
    sub_labels, sub_out = labels[present], student[present]
    sup = 0.0
    if task == TaskId.EXPR:
        sup = _expr_ce(sub_labels.expr, sub_out.expr_logits).mean()
    else:
        sup = _va_ce(sub_labels.va, sub_out.va_logits).mean()
        if m >= 2:
            sup = sup + _va_ccc_penalty(sub_labels.va, sub_out.va_logits, cfg.ccc_epsilon)
    return lam * (m / n) * sup, dist


def student_batch_loss(labels: Sequence[Labels], teacher_outputs: Sequence[FrameModelOutput],
                       student_outputs: Sequence[FrameModelOutput], cfg: DistillationConfig,
                       use_shared_annotations: bool = False, tasks=ALL_TASKS) -> LossBreakdown:
    """Student objective over one batch triplet.

    Every part gets the lambda-blended supervision/distillation loss of its
    own task. Parts 1 and 2 additionally get a term for the other single task,
    evaluated on the same instances: pure distillation, or (with
    ``use_shared_annotations``) the blended loss where that label exists.
    Teacher outputs should come from a frozen teacher.
    """
    _check_triplet(labels, student_outputs)
    _check_triplet(labels, teacher_outputs)
    lam = cfg.lambda_weight
    per_task, sup_parts, dist_parts = {}, [], []
    for task in ALL_TASKS:
        if task not in tasks:
            continue
        lab, t_out, s_out = labels[task - 1], teacher_outputs[task - 1], student_outputs[task - 1]
        if use_shared_annotations:
            lab.validate()
        sup = lam * supervision_loss(task, lab, s_out, cfg)
        dist = (1.0 - lam) * distillation_loss(task, t_out, s_out, cfg)
        term = sup + dist
        sup_parts.append(sup)
        dist_parts.append(dist)
        if task != TaskId.EXPR_VA:
            other = TaskId.VA if task == TaskId.EXPR else TaskId.EXPR
            sec_sup, sec_dist = _secondary_term(other, lab, t_out, s_out, cfg, use_shared_annotations)
            if sec_sup is not None:
                term = term + sec_sup
                sup_parts.append(sec_sup)
            term = term + sec_dist
            dist_parts.append(sec_dist)
        per_task[task] = term
    total = sum(per_task.values())
    return LossBreakdown(total=total, per_task=per_task, supervision_part=sum(sup_parts),
                         distillation_part=sum(dist_parts))
