"""Teacher and student training loops, early stopping and the full pipeline.

One optimiser step consumes one batch triplet. Every stage draws from
class/valence-balanced pools; sequence windows are keyed by their majority
class and mean valence. Frame stages augment every image independently;
sequence stages, when frame images and an extractor are available, augment
whole sequences with a single draw before re-extracting their features.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import (
    checkpoint_payload,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .config import PipelineConfig, TrainingConfig, derive_seed
from .datakit import (
    ArrayDataset,
    TripletSampler,
    augment_batch,
    balanced_pools,
    build_sequence_dataset,
    frame_dataset,
    load_frames,
    load_manifest,
    sequence_dataset,
    write_feature_store,
)
from .datakit.synth import Corpus
from .losses import (
    DistillationConfig,
    FrameModelOutput,
    Labels,
    decode_va,
    student_batch_loss,
    teacher_batch_loss,
)
from .metrics import MetricsReport, PredictionSet, evaluate
from .models import (
    FrameModelSpec,
    model_from_spec,
    predict_outputs,
    spec_to_dict,
)

logger = logging.getLogger(__name__)

STAGES = ("frame_teacher", "frame_student", "temporal_teacher", "temporal_student")


class TrainingDivergedError(RuntimeError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs bring no strict improvement."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best = -math.inf
        self.bad_epochs = 0

    def update(self, score: float) -> str:
        if score > self.best:
            self.best = score
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return "stop" if self.bad_epochs >= self.patience else "continue"


@dataclass
class TrainData:
    train: ArrayDataset
    val: ArrayDataset
    # sequence stages only: frame model used to re-extract features of augmented sequences
    feature_extractor: Callable | None = None


@dataclass
class RunRecord:
    stage: str
    epochs: list = field(default_factory=list)
    batch_losses: list = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = -math.inf
    best_checkpoint: str | None = None

    def best_report(self) -> MetricsReport:
        return MetricsReport.from_dict(self.epochs[self.best_epoch - 1]["val"])


# ---------------------------------------------------------------------------
# evaluation helpers


def predictions(model, ds: ArrayDataset, batch_size: int = 256) -> PredictionSet:
    out, _ = predict_outputs(model, ds.x, batch_size)
    mask = torch.as_tensor(ds.mask)
    flat = out.flatten(mask)
    expr_true, va_true = ds.frame_labels()
    expr_pred = flat.expr_logits.argmax(dim=-1).numpy()
    va_pred = decode_va(torch.softmax(flat.va_logits.double(), dim=-1)).numpy()
    return PredictionSet(expr_true, expr_pred, va_true, va_pred, ds.frame_ids)


def evaluate_model(model, ds: ArrayDataset) -> MetricsReport:
    return evaluate(predictions(model, ds))


# ---------------------------------------------------------------------------
# batching


def _split_parts(out: FrameModelOutput, n: int, masks) -> list[FrameModelOutput]:
    return [out[i * n:(i + 1) * n].flatten(masks[i]) for i in range(3)]


def _part_labels(ds: ArrayDataset, idx, dtype) -> tuple[Labels, torch.Tensor]:
    mask = torch.as_tensor(ds.mask[idx])
    lab = Labels(torch.as_tensor(ds.expr[idx]), torch.as_tensor(ds.va[idx], dtype=dtype)).flatten(mask)
    return lab, mask


def sequence_balance_keys(ds: ArrayDataset):
    """Per-window labels for balancing: majority expression and mean valence/arousal of real frames."""
    expr = np.full(len(ds), -1, dtype=np.int64)
    va = np.full((len(ds), 2), np.nan, dtype=np.float32)
    for i in range(len(ds)):
        e, v = ds.expr[i][ds.mask[i]], ds.va[i][ds.mask[i]]
        e = e[e >= 0]
        if e.size:
            expr[i] = np.bincount(e).argmax()
        v = v[~np.isnan(v).any(axis=1)]
        if v.size:
            va[i] = v.mean(axis=0)
    return expr, va


def _pools(ds: ArrayDataset, num_bins: int, seed: int) -> dict:
    if ds.is_sequence:
        expr, va = sequence_balance_keys(ds)
        return balanced_pools(expr, va, ds.part, num_bins, seed)
    return balanced_pools(ds.expr, ds.va, ds.part, num_bins, seed)


def _dump_divergence(out_dir, info: dict):
    if out_dir is None:
        return
    path = Path(out_dir) / "divergence.json"
    path.write_text(json.dumps(info, indent=2, sort_keys=True, default=str), encoding="utf-8")


def _fit(model, data: TrainData, tcfg: TrainingConfig, dcfg: DistillationConfig, stage: str, objective,
         role: str, teacher=None, out_dir=None, evaluator=None, batch_hook=None):
    """Shared loop for every stage; returns the model restored to its best epoch."""
    dtype = torch.float64 if tcfg.dtype == "float64" else torch.float32
    model.to(dtype)
    train = data.train
    sequence = train.is_sequence
    n = tcfg.per_part_batch_sequence if sequence else tcfg.per_part_batch_frame
    sampler = TripletSampler(_pools(train, dcfg.num_bins, derive_seed(tcfg.seed, stage, "pools")),
                             n, derive_seed(tcfg.seed, stage, "batches"))
    if len(sampler) == 0:
        raise ValueError(f"{stage}: pools too small for one batch of {n} per part")
    optimizer = torch.optim.Adam(model.parameters(), lr=tcfg.learning_rate)
    stopper = EarlyStopping(tcfg.patience)
    evaluator = evaluator or (lambda m: evaluate_model(m, data.val))
    record = RunRecord(stage)
    best_state = None
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "epochs.log", "w", encoding="utf-8")
    augment_seq = sequence and tcfg.augment and train.images is not None and data.feature_extractor is not None
    try:
        for epoch in range(1, tcfg.max_epochs + 1):
            model.train()
            aug_rng = np.random.default_rng(derive_seed(tcfg.seed, stage, "augment", epoch))
            sums: dict = {}
            steps = 0
            for step, triplet in enumerate(sampler.epoch(epoch)):
                idx = np.concatenate(triplet)
                if augment_seq:
                    x = data.feature_extractor(augment_batch(train.images[idx], aug_rng))
                elif tcfg.augment and not sequence:
                    x = augment_batch(train.x[idx], aug_rng)
                else:
                    x = train.x[idx]
                x = torch.as_tensor(x, dtype=dtype)
                labels, masks = zip(*(_part_labels(train, t, dtype) for t in triplet))
                out, _ = model(x)
                student_parts = _split_parts(out, n, masks)
                teacher_parts = None
                if teacher is not None:
                    with torch.no_grad():
                        t_out, _ = teacher(x)
                    teacher_parts = _split_parts(t_out, n, masks)
                breakdown = objective(labels, teacher_parts, student_parts)
                loss = breakdown.total
                if not torch.isfinite(loss):
                    info = {"stage": stage, "epoch": epoch, "step": step, "loss": breakdown.as_dict()}
                    _dump_divergence(out_dir, info)
                    raise TrainingDivergedError(f"{stage}: non-finite loss at epoch {epoch}, step {step}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                if batch_hook is not None:
                    batch_hook({"epoch": epoch, "step": step, "labels": labels, "teacher": teacher_parts,
                                "student": [p.detach() for p in student_parts], "breakdown": breakdown})
                logged = breakdown.as_dict()
                record.batch_losses.append(logged["total"])
                for key in ("total", "supervision_part", "distillation_part"):
                    sums[key] = sums.get(key, 0.0) + logged[key]
                steps += 1
            report = evaluator(model)
            score = report.selection_score()
            entry = {"epoch": epoch, "loss": {k: v / steps for k, v in sums.items()},
                     "val": report.to_dict(), "score": score}
            record.epochs.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            logger.info("%s epoch %d loss %.4f score %.4f", stage, epoch, entry["loss"]["total"], score)
            decision = stopper.update(score)
            if stopper.bad_epochs == 0:
                record.best_epoch, record.best_score = epoch, score
                best_state = copy.deepcopy(model.state_dict())
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.ckpt", checkpoint_payload(
                        model, role, dcfg, epoch, score, optimizer, {"stage": stage}))
                    record.best_checkpoint = str(out_dir / "best.ckpt")
            if out_dir is not None:
                save_checkpoint(out_dir / "last.ckpt", checkpoint_payload(
                    model, role, dcfg, epoch, record.best_score, optimizer, {"stage": stage}))
            if decision == "stop":
                logger.info("%s: early stop after epoch %d", stage, epoch)
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        (out_dir / "report.json").write_text(json.dumps(stage_summary(record), indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    return model, record


def stage_summary(record: RunRecord) -> dict:
    return {"stage": record.stage, "best_epoch": record.best_epoch, "epochs_run": len(record.epochs),
            "best_score": record.best_score, "metrics": record.best_report().to_dict()}


def _stage_name(stage: str, role: str) -> str:
    if stage not in ("frame", "temporal"):
        raise ValueError(f"stage must be 'frame' or 'temporal', got {stage!r}")
    return f"{stage}_{role}"


def _check_spec_vs_data(spec, ds: ArrayDataset, dcfg: DistillationConfig):
    if spec.num_bins != dcfg.num_bins:
        raise ValueError(f"model has {spec.num_bins} VA bins, distillation config {dcfg.num_bins}")
    if isinstance(spec, FrameModelSpec):
        if ds.is_sequence or tuple(ds.x.shape[1:]) != spec.image_size:
            raise ValueError(f"frame model expects {spec.image_size} images, data is {ds.x.shape[1:]}")
    elif ds.x.ndim != 3 or ds.x.shape[-1] != spec.input_dim:
        raise ValueError(f"temporal model expects {spec.input_dim}-d feature sequences, data is {ds.x.shape[1:]}")


def _write_snapshot(out_dir, snapshot: dict | None):
    if out_dir is None or snapshot is None:
        return
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "config.snapshot").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n",
                                                  encoding="utf-8")


def train_teacher(stage: str, data: TrainData, spec, tcfg: TrainingConfig, dcfg: DistillationConfig,
                  out_dir=None, evaluator=None, batch_hook=None, snapshot: dict | None = None):
    """Fit a teacher on ground truth only, over the task set ``tcfg.tasks``."""
    name = _stage_name(stage, "teacher")
    _check_spec_vs_data(spec, data.train, dcfg)
    _write_snapshot(out_dir, snapshot)
    model = model_from_spec(spec, derive_seed(tcfg.seed, name, "init"))
    objective = lambda labels, _t, s: teacher_batch_loss(labels, s, dcfg, tasks=tcfg.tasks)  # noqa: E731
    return _fit(model, data, tcfg, dcfg, name, objective, "teacher", out_dir=out_dir,
                evaluator=evaluator, batch_hook=batch_hook)


def _resolve_teacher(teacher):
    if isinstance(teacher, (str, Path)):
        return model_from_checkpoint(load_checkpoint(teacher))
    if isinstance(teacher, dict):
        return model_from_checkpoint(teacher)
    return teacher


def train_student(stage: str, data: TrainData, teacher, tcfg: TrainingConfig, dcfg: DistillationConfig,
                  use_shared_annotations: bool | None = None, spec=None, out_dir=None, evaluator=None,
                  batch_hook=None, objective=None, snapshot: dict | None = None):
    """Fit a student against a frozen teacher (a model, checkpoint path or loaded payload).

    ``use_shared_annotations`` defaults to ``tcfg.use_shared_annotations``.
    ``objective(labels, teacher_parts, student_parts)`` replaces the student
    loss when given.
    """
    name = _stage_name(stage, "student")
    teacher = _resolve_teacher(teacher)
    spec = spec or teacher.spec
    if spec_to_dict(spec)["kind"] != spec_to_dict(teacher.spec)["kind"] or spec.num_bins != teacher.spec.num_bins:
        raise ValueError("student and teacher specs are incompatible")
    _check_spec_vs_data(teacher.spec, data.train, dcfg)
    _check_spec_vs_data(spec, data.train, dcfg)
    _write_snapshot(out_dir, snapshot)
    shared = tcfg.use_shared_annotations if use_shared_annotations is None else use_shared_annotations
    dtype = torch.float64 if tcfg.dtype == "float64" else torch.float32
    teacher = teacher.to(dtype).eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    if tcfg.student_init == "teacher":
        model = copy.deepcopy(teacher)
        for p in model.parameters():
            p.requires_grad_(True)
    else:
        model = model_from_spec(spec, derive_seed(tcfg.seed, name, "init"))
    if objective is None:
        objective = partial(_student_objective, dcfg=dcfg, shared=shared, tasks=tcfg.tasks)
    return _fit(model, data, tcfg, dcfg, name, objective, "student", teacher=teacher, out_dir=out_dir,
                evaluator=evaluator, batch_hook=batch_hook)


def _student_objective(labels, teacher_parts, student_parts, dcfg, shared, tasks):
    return student_batch_loss(labels, teacher_parts, student_parts, dcfg,
                              use_shared_annotations=shared, tasks=tasks)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class FrameData:
    train_records: list
    val_records: list
    train_frames: np.ndarray
    val_frames: np.ndarray

    def arrays(self) -> TrainData:
        return TrainData(frame_dataset(self.train_records, self.train_frames),
                         frame_dataset(self.val_records, self.val_frames))


def load_frame_data(data_dir, image_size=None) -> FrameData:
    """Read ``train.csv`` / ``val.csv`` from a corpus directory with their frames."""
    data_dir = Path(data_dir)
    train = load_manifest(data_dir / "train.csv")
    val = load_manifest(data_dir / "val.csv")
    return FrameData(train, val, load_frames(train, data_dir, image_size), load_frames(val, data_dir, image_size))


def frame_data_from_corpus(corpus: Corpus) -> FrameData:
    def frames(records):
        rows = [int(r.frame_ref.rsplit("#", 1)[1]) for r in records]
        return corpus.images[rows].astype(np.float32) / 255.0

    return FrameData(corpus.train, corpus.val, frames(corpus.train), frames(corpus.val))


def feature_extractor(frame_model, batch_size: int = 512):
    """Callable mapping (k, L, h, w) frame stacks to (k, L, d) features."""
    def extract(images):
        k, L = images.shape[:2]
        _, feats = predict_outputs(frame_model, images.reshape(k * L, *images.shape[2:]), batch_size)
        return feats.to(torch.float32).numpy().reshape(k, L, -1)
    return extract


def sequence_data(frame_model, fd: FrameData, tcfg: TrainingConfig, keep_images: bool = True,
                  store_dir=None) -> TrainData:
    """Extract features with ``frame_model`` and cut both splits into sequences.

    With ``store_dir`` the features are also written as ``train.mtlf`` and
    ``val.mtlf`` feature stores.
    """
    feats = {}
    for split, frames, records in (("train", fd.train_frames, fd.train_records),
                                   ("val", fd.val_frames, fd.val_records)):
        _, f = predict_outputs(frame_model, frames, 512)
        feats[split] = f.to(torch.float32).numpy()
        if store_dir is not None:
            Path(store_dir).mkdir(parents=True, exist_ok=True)
            write_feature_store(Path(store_dir) / f"{split}.mtlf", feats[split],
                                [(r.video_id, r.frame_index) for r in records])
    train_seq = build_sequence_dataset(feats["train"], fd.train_records, stride=tcfg.sequence_stride,
                                       images=fd.train_frames if keep_images else None)
    val_seq = build_sequence_dataset(feats["val"], fd.val_records)
    return TrainData(sequence_dataset(train_seq), sequence_dataset(val_seq),
                     feature_extractor(frame_model) if keep_images else None)


def run_pipeline(corpus, cfg: PipelineConfig, out_dir=None, use_shared_annotations: bool | None = None) -> dict:
    """Frame teacher -> frame student -> feature extraction -> temporal teacher -> temporal student.

    ``corpus`` is a Corpus, a FrameData, or a corpus directory. Returns the
    consolidated report; with ``out_dir`` every stage gets its own run
    directory and ``report.json`` is written at the top.
    """
    if isinstance(corpus, Corpus):
        fd = frame_data_from_corpus(corpus)
    elif isinstance(corpus, FrameData):
        fd = corpus
    else:
        fd = load_frame_data(corpus, cfg.frame_model.image_size)
    tcfg, dcfg = cfg.training, cfg.distillation
    shared = tcfg.use_shared_annotations if use_shared_annotations is None else use_shared_annotations
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.snapshot").write_text(cfg.snapshot(), encoding="utf-8")

    def sub(stage):
        return None if out is None else out / stage

    report = {"config": cfg.to_dict(), "use_shared_annotations": shared, "stages": {}}
    records, models = {}, {}

    def run(stage, fn):
        try:
            model, rec = fn()
        except Exception as e:
            raise StageError(stage, e) from e
        records[stage] = rec
        models[stage] = model
        report["stages"][stage] = stage_summary(rec)
        return model

    snap = cfg.to_dict()
    frame = fd.arrays()
    teacher = run("frame_teacher", lambda: train_teacher("frame", frame, cfg.frame_model, tcfg, dcfg,
                                                          sub("frame_teacher"), snapshot=snap))
    student = run("frame_student", lambda: train_student("frame", frame, teacher, tcfg, dcfg, shared,
                                                          out_dir=sub("frame_student"), snapshot=snap))
    try:
        seq = sequence_data(student, fd, tcfg, keep_images=tcfg.augment, store_dir=sub("features"))
    except Exception as e:
        raise StageError("extract_features", e) from e
    t_teacher = run("temporal_teacher", lambda: train_teacher("temporal", seq, cfg.temporal_model, tcfg, dcfg,
                                                               sub("temporal_teacher"), snapshot=snap))
    run("temporal_student", lambda: train_student("temporal", seq, t_teacher, tcfg, dcfg, shared,
                                                  out_dir=sub("temporal_student"), snapshot=snap))
    if out is not None:
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    report["_records"] = records
    report["_models"] = models
    report["_frame_data"] = fd
    return report


def public_report(report: dict) -> dict:
    return {k: v for k, v in report.items() if not k.startswith("_")}


def seed_sweep(corpus, cfg: PipelineConfig, seeds, out_dir=None, **kwargs) -> dict:
    """Run the pipeline once per training seed; mean and std of every stage metric."""
    runs = {}
    for seed in seeds:
        run_cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, seed=int(seed)))
        sub = None if out_dir is None else Path(out_dir) / f"seed-{seed}"
        runs[int(seed)] = public_report(run_pipeline(corpus, run_cfg, sub, **kwargs))
    summary = {}
    for stage in STAGES:
        metrics = [r["stages"][stage]["metrics"] for r in runs.values()]
        summary[stage] = {}
        for key in ("expr_score", "macro_f1", "total_accuracy", "valence_ccc", "arousal_ccc", "va_score"):
            vals = np.array([m[key] for m in metrics], dtype=float)
            summary[stage][key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return {"seeds": [int(s) for s in seeds], "runs": runs, "summary": summary}
