"""Acceptance suite: one group of tests per criterion, summarised at the end of the run.

The training criteria (7 to 9) run real training and take about half an hour on one core; they are
marked ``slow`` and can be skipped with ``-m "not slow"``.
"""
from __future__ import annotations

import dataclasses
import time

import numpy as np
import pytest
import torch

import oracles
from conftest import random_triplet
from fd import fd_relative_error
from fixtures import TEN_FRAMES, hand_oracle
from affectkd.checkpoint import load_checkpoint, save_checkpoint
from affectkd.config import TrainingConfig, resolve_config
from affectkd.datakit import (
    AnnotationRecord,
    Part,
    SynthSpec,
    balance_parts,
    group_counts,
    load_manifest,
    read_feature_store,
    synthesize_corpus,
    write_feature_store,
    write_manifest,
)
from affectkd.losses import (
    DistillationConfig,
    FrameModelOutput,
    TaskId,
    ccc,
    combined_sample_loss,
    cross_entropy,
    decode_va,
    distillation_loss,
    kl_divergence,
    softmax_temperature,
    student_batch_loss,
    supervision_loss,
    teacher_batch_loss,
)
from affectkd.metrics import PredictionSet, accuracy, evaluate, expr_challenge_score, macro_f1
from affectkd.models import FrameModelSpec
from affectkd.trainer import frame_data_from_corpus, public_report, run_pipeline, train_student, train_teacher

CFG8 = DistillationConfig(num_bins=8)
TASKS = (TaskId.EXPR, TaskId.VA, TaskId.EXPR_VA)
SMALL_SPEC = FrameModelSpec(image_size=(16, 16), feature_dim=16, width=4, num_bins=8)


def criterion(number, title):
    return pytest.mark.criterion(number, title)


def _small_frame_data(shared_fraction):
    corpus = synthesize_corpus(SynthSpec(num_videos=2, num_val_videos=1, frames_per_video=48, image_size=(16, 16),
                                         shared_fraction=shared_fraction))
    return frame_data_from_corpus(corpus).arrays()


def _tcfg(**kw):
    base = dict(max_epochs=2, patience=2, learning_rate=1e-3, augment=False)
    base.update(kw)
    return TrainingConfig(**base)


# --- 1: finite-difference gradients ------------------------------------------

GRAD_INSTANCES = 20


def _grad_ops(seed):
    """(name, fn, leaves) for every differentiable loss operation on one random instance."""
    r = np.random.default_rng(seed)
    labels, t_outs, s_outs, _ = random_triplet(r, n=4, B=8, shared_prob=0.5)
    w7, w2 = torch.tensor(r.normal(size=(4, 7))), torch.tensor(r.normal(size=(4, 2)))
    T = float(r.uniform(0.5, 4.0))
    te, tv, se, sv = (t_outs[2].expr_logits, t_outs[2].va_logits, s_outs[2].expr_logits, s_outs[2].va_logits)
    pair = [te, tv, se, sv]

    def on_pair(fn):
        return lambda a, b, c, d: fn(FrameModelOutput(a, b), FrameModelOutput(c, d))

    ops = [
        ("softmax_temperature", lambda x: (softmax_temperature(x, T) * w7).sum(), [se]),
        ("cross_entropy", lambda p, q: cross_entropy(torch.softmax(p, -1), torch.softmax(q, -1)).sum(), [te, se]),
        ("kl_divergence", lambda p, q: kl_divergence(torch.softmax(p, -1), torch.softmax(q, -1)).sum(), [te, se]),
        ("ccc", lambda x, y: ccc(x, y), [torch.tensor(r.normal(size=8)), torch.tensor(r.normal(size=8))]),
        ("decode_va", lambda x: (decode_va(torch.softmax(x, -1)) * w2).sum(), [sv]),
    ]
    for task in TASKS:
        part = task - 1
        lab = labels[part]
        leaves = [t_outs[part].expr_logits, t_outs[part].va_logits, s_outs[part].expr_logits, s_outs[part].va_logits]
        if task == TaskId.EXPR_VA:
            leaves = pair
        ops += [
            (f"supervision_{task.name}", on_pair(lambda t, s, lab=lab, task=task: supervision_loss(task, lab, s, CFG8)),
             leaves),
            (f"distillation_{task.name}", on_pair(lambda t, s, task=task: distillation_loss(task, t, s, CFG8)), leaves),
            (f"combined_{task.name}",
             on_pair(lambda t, s, lab=lab, task=task: combined_sample_loss(task, lab, t, s, CFG8)), leaves),
        ]

    student_leaves = [x for o in s_outs for x in (o.expr_logits, o.va_logits)]

    def unpack(args):
        return [FrameModelOutput(args[2 * i], args[2 * i + 1]) for i in range(3)]

    ops += [
        ("teacher_batch_loss", lambda *a: teacher_batch_loss(labels, unpack(a), CFG8).total, student_leaves),
        ("student_batch_loss_shared", lambda *a: student_batch_loss(labels, t_outs, unpack(a), CFG8, True).total,
         student_leaves),
        ("student_batch_loss_unshared", lambda *a: student_batch_loss(labels, t_outs, unpack(a), CFG8, False).total,
         student_leaves),
    ]
    return ops


@criterion(1, "finite-difference gradient suite")
def test_gradient_suite(record_property):
    start = time.perf_counter()
    worst: dict = {}
    for seed in range(GRAD_INSTANCES):
        for name, fn, leaves in _grad_ops(seed):
            worst[name] = max(worst.get(name, 0.0), fd_relative_error(fn, leaves, step=1e-4))
    elapsed = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    record_property("detail", f"{len(worst)} ops x {GRAD_INSTANCES} instances, worst {name} {err:.1e}, "
                              f"{elapsed:.0f}s")
    assert len(worst) == 17
    assert err < 1e-3, worst
    assert elapsed < 120


# --- 2: oracle equivalence ---------------------------------------------------


@criterion(2, "oracle equivalence of batch losses")
def test_batch_losses_match_brute_force_oracle(record_property):
    worst = 0.0
    for seed in range(50):
        r = np.random.default_rng(10_000 + seed)
        labels, t_outs, s_outs, parts = random_triplet(r, n=4, B=8, shared_prob=0.5)
        pairs = [(teacher_batch_loss(labels, s_outs, CFG8).total.item(), oracles.teacher_loss(parts))]
        for shared in (False, True):
            got = student_batch_loss(labels, t_outs, s_outs, CFG8, use_shared_annotations=shared).total.item()
            pairs.append((got, oracles.student_loss(parts, CFG8.lambda_weight, CFG8.temperature, shared)))
        for got, ref in pairs:
            rel = abs(got - ref) / abs(ref)
            worst = max(worst, rel)
            assert rel <= 1e-9, (seed, got, ref)
    record_property("detail", f"150 comparisons, worst rel {worst:.1e}")


# --- 3: shared-annotation branch degenerates without shared labels -----------


@criterion(3, "flag on/off identical without shared annotations")
def test_flag_degenerates_on_random_batches(record_property):
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(20_000 + seed)
        labels, t_outs, s_outs, _ = random_triplet(r, n=4, B=8, shared_prob=0.0)
        on = student_batch_loss(labels, t_outs, s_outs, CFG8, use_shared_annotations=True).total.item()
        off = student_batch_loss(labels, t_outs, s_outs, CFG8, use_shared_annotations=False).total.item()
        worst = max(worst, abs(on - off))
        assert abs(on - off) <= 1e-12
    record_property("detail", f"20 batches, worst diff {worst:.1e}")


@criterion(3, "flag on/off identical without shared annotations")
def test_flag_degenerates_over_training(record_property):
    data = _small_frame_data(shared_fraction=0.0)
    teacher, _ = train_teacher("frame", data, SMALL_SPEC, _tcfg(max_epochs=1, patience=1), CFG8)
    runs = [train_student("frame", data, teacher, _tcfg(), CFG8, use_shared_annotations=flag)[1]
            for flag in (True, False)]
    on, off = runs
    assert len(on.batch_losses) == len(off.batch_losses) and len(on.epochs) == 2
    diff = max(abs(a - b) for a, b in zip(on.batch_losses, off.batch_losses))
    for ea, eb in zip(on.epochs, off.epochs):
        assert abs(ea["score"] - eb["score"]) <= 1e-6
    record_property("detail", f"{len(on.batch_losses)} steps, worst diff {diff:.1e}")
    assert diff <= 1e-6


# --- 4: distillation identities ----------------------------------------------


@criterion(4, "distillation identities")
def test_self_distillation_vanishes(record_property):
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(30_000 + seed)
        labels, t_outs, _, _ = random_triplet(r, n=4, B=8, shared_prob=0.5)
        for task in TASKS:
            worst = max(worst, abs(distillation_loss(task, t_outs[task - 1], t_outs[task - 1], CFG8).item()))
        for shared in (False, True):
            bd = student_batch_loss(labels, t_outs, t_outs, CFG8, use_shared_annotations=shared)
            worst = max(worst, abs(float(bd.distillation_part)))
    record_property("detail", f"self-distillation max {worst:.1e}")
    assert worst <= 1e-10


def _supervision_only(dcfg):
    """Ground-truth loss of every part plus the secondary-task distillation, which has no supervised
    counterpart when shared annotations are off."""

    def objective(labels, teacher_parts, student_parts):
        bd = teacher_batch_loss(labels, student_parts, dcfg)
        secondary = (distillation_loss(TaskId.VA, teacher_parts[0], student_parts[0], dcfg)
                     + distillation_loss(TaskId.EXPR, teacher_parts[1], student_parts[1], dcfg))
        return dataclasses.replace(bd, total=bd.total + secondary, distillation_part=secondary)

    return objective


@criterion(4, "distillation identities")
def test_lambda_one_matches_supervision_only_trajectory(record_property):
    data = _small_frame_data(shared_fraction=0.5)
    cfg = _tcfg(dtype="float64")
    teacher, _ = train_teacher("frame", data, SMALL_SPEC, _tcfg(max_epochs=1, patience=1, dtype="float64"), CFG8)
    dcfg = DistillationConfig(lambda_weight=1.0, num_bins=8)
    a_model, a = train_student("frame", data, teacher, cfg, dcfg, use_shared_annotations=False)
    b_model, b = train_student("frame", data, teacher, cfg, dcfg, use_shared_annotations=False,
                               objective=_supervision_only(dcfg))
    assert len(a.epochs) == len(b.epochs) == 2 and len(a.batch_losses) == len(b.batch_losses)
    diff = max(abs(x - y) for x, y in zip(a.batch_losses, b.batch_losses))
    params = max((p - q).abs().max().item() for p, q in zip(a_model.parameters(), b_model.parameters()))
    record_property("detail", f"lambda=1: loss diff {diff:.1e}, param diff {params:.1e}")
    assert diff <= 1e-6 and params <= 1e-6


@criterion(4, "distillation identities")
def test_combined_weighting_on_logged_batches(record_property):
    data = _small_frame_data(shared_fraction=0.5)
    teacher, _ = train_teacher("frame", data, SMALL_SPEC, _tcfg(max_epochs=1, patience=1, dtype="float64"), CFG8)
    dcfg = DistillationConfig(lambda_weight=0.6, num_bins=8)
    errors = []

    def check(info):
        labels, t, s, bd = info["labels"], info["teacher"], info["student"], info["breakdown"]
        for task in TASKS:
            p = task - 1
            sup = supervision_loss(task, labels[p], s[p], dcfg).item()
            dist = distillation_loss(task, t[p], s[p], dcfg).item()
            expected = 0.6 * sup + 0.4 * dist
            if task != TaskId.EXPR_VA:
                other = TaskId.VA if task == TaskId.EXPR else TaskId.EXPR
                expected += distillation_loss(other, t[p], s[p], dcfg).item()
            errors.append(abs(bd.per_task[task].detach().item() - expected) / max(abs(expected), 1e-12))

    train_student("frame", data, teacher, _tcfg(max_epochs=1, patience=1, dtype="float64"), dcfg,
                  use_shared_annotations=False, batch_hook=check)
    record_property("detail", f"{len(errors) // 3} logged batches, worst rel {max(errors):.1e}")
    assert errors and max(errors) <= 1e-9


# --- 5: metric fixtures ------------------------------------------------------


@criterion(5, "metric fixtures")
def test_metric_fixtures():
    ids, et, vt, ep, vp = zip(*TEN_FRAMES)
    report = evaluate(PredictionSet.from_lists(et, ep, vt, vp, list(ids)))
    oracle = hand_oracle(TEN_FRAMES)
    for key in ("macro_f1", "total_accuracy", "expr_score"):
        assert abs(getattr(report, key) - oracle[key]) <= 1e-9, key
    for key in ("valence_ccc", "arousal_ccc", "va_score"):
        assert abs(getattr(report, key) - oracle[key]) <= 1e-6, key
    assert abs(macro_f1([0, 0, 1, 1], [0, 1, 1, 1]) - (2 / 3 + 4 / 5) / 7) <= 1e-9
    assert accuracy([0, 0, 1, 1], [0, 1, 1, 1]) == 0.75
    assert abs(expr_challenge_score(0.3, 0.5) - 0.366) <= 1e-9


@criterion(5, "metric fixtures")
@pytest.mark.parametrize("x, y, expected", [
    ([-1, 0, 1], [-1, 0, 1], 1.0),
    ([-1, 0, 1], [1, 0, -1], -1.0),
    ([-1, 0, 1], [0, 0, 0], 0.0),
    ([-1, 0, 1], [0, 1, 2], 4 / 7),  # same spread, shifted mean
    ([-1, 0, 1], [-2, 0, 2], 0.8),  # doubled spread
])
def test_ccc_hand_values(x, y, expected):
    assert abs(ccc(x, y).item() - expected) <= 1e-6


# --- 6: balancing ------------------------------------------------------------


def _skewed_manifest():
    r = np.random.default_rng(7)
    records = []
    class_counts = [400, 120, 60, 30, 15, 9, 5]
    for part in (Part.MIXED_EXPR, Part.EXPR_VA):
        for c, count in enumerate(class_counts):
            for k in range(count if part == Part.MIXED_EXPR else max(count // 3, 2)):
                va = None if part == Part.MIXED_EXPR else tuple(float(v) for v in r.uniform(-1, 1, 2))
                records.append(AnnotationRecord(f"{part.name}-{c}-{k}.png", part, c, va, f"{part.name}-{c}", k))
    # valence skewed towards positive values
    valence = np.clip(r.beta(5, 1.5, size=900) * 2 - 1, -1, 1)
    for k, v in enumerate(valence):
        records.append(AnnotationRecord(f"va-{k}.png", Part.MIXED_VA, None, (float(v), float(r.uniform(-1, 1))),
                                        "va", k))
    return records


@criterion(6, "balancing bound")
def test_balancing_bound(record_property):
    records = _skewed_manifest()
    balanced = balance_parts(records, num_bins=20, seed=0)
    ratios = {}
    for part in Part:
        before = group_counts(records, part)
        after = group_counts(balanced, part)
        assert set(after) == set(before)
        target = max(before.values())
        # every group is topped up to the largest one, originals kept
        assert all(after[k] == target for k in after), (part, after)
        assert sum(r.part == part for r in balanced) == target * len(before)
        kept = {r.frame_ref for r in balanced if r.part == part}
        assert kept == {r.frame_ref for r in records if r.part == part}
        ratios[part] = max(after.values()) / min(after.values())
    record_property("detail", ", ".join(f"{p.name} {v:.2f}" for p, v in ratios.items()))
    assert ratios[Part.MIXED_EXPR] <= 1.1 and ratios[Part.EXPR_VA] <= 1.1
    assert ratios[Part.MIXED_VA] <= 1.5


# --- 7: end-to-end learning on the default corpus ----------------------------


@pytest.mark.slow
@criterion(7, "frame teacher learns the separable corpus")
def test_frame_teacher_learns(record_property):
    cfg = resolve_config()
    corpus = synthesize_corpus(cfg.synth)
    data = frame_data_from_corpus(corpus).arrays()
    start = time.perf_counter()
    _, rec = train_teacher("frame", data, cfg.frame_model, cfg.training, cfg.distillation)
    elapsed = time.perf_counter() - start
    best = rec.best_report()
    mean_ccc = best.va_score
    record_property("detail", f"{len(data.train) + len(data.val)} frames, best epoch {rec.best_epoch}/"
                              f"{len(rec.epochs)}, expr {best.expr_score:.3f}, CCC {mean_ccc:.3f}, {elapsed:.0f}s")
    assert len(rec.epochs) <= 40
    assert best.expr_score >= 0.90 and mean_ccc >= 0.80
    assert elapsed < 600


# --- 8: shared annotations, frame students over 3 seeds ----------------------

SEEDS = (0, 1, 2)
# default corpus size with weak class signal; at 0.3 four videos of each single-task part are shared
SHARING_CORPUS = SynthSpec(class_signal_strength=0.3, temporal_dependence=True, shared_fraction=0.3)
# smaller temporal corpus so three full pipelines stay within minutes
TEMPORAL_CORPUS = SynthSpec(num_videos=8, num_val_videos=3, class_signal_strength=0.3, temporal_dependence=True,
                            shared_fraction=0.3)


def _seed_config(seed):
    return resolve_config(overrides={"training": {"seed": seed, "max_epochs": 10, "patience": 5}})


def _combined_score(report):
    return report.expr_score + report.va_score


@pytest.mark.slow
@criterion(8, "sharing annotations does not hurt the student")
def test_sharing_helps(record_property):
    data = frame_data_from_corpus(synthesize_corpus(SHARING_CORPUS)).arrays()
    scores = {True: [], False: []}
    for seed in SEEDS:
        cfg = _seed_config(seed)
        teacher, _ = train_teacher("frame", data, cfg.frame_model, cfg.training, cfg.distillation)
        for flag in (True, False):
            _, rec = train_student("frame", data, teacher, cfg.training, cfg.distillation,
                                   use_shared_annotations=flag, spec=cfg.frame_model)
            scores[flag].append(_combined_score(rec.best_report()))
    shared, unshared = np.mean(scores[True]), np.mean(scores[False])
    record_property("detail", f"with sharing {shared:.4f}, without {unshared:.4f}, margin {shared - unshared:+.4f}")
    assert shared >= unshared - 0.02


# --- 9: temporal stage over 3 seeds -------------------------------------------


@pytest.mark.slow
@criterion(9, "temporal student beats frame student on CCC")
def test_temporal_student_beats_frame_student(record_property):
    corpus = synthesize_corpus(TEMPORAL_CORPUS)
    temporal, frame = [], []
    for seed in SEEDS:
        records = run_pipeline(corpus, _seed_config(seed))["_records"]
        temporal.append(records["temporal_student"].best_report().va_score)
        frame.append(records["frame_student"].best_report().va_score)
    record_property("detail", f"temporal CCC {np.mean(temporal):.4f}, frame CCC {np.mean(frame):.4f}")
    assert np.mean(temporal) > np.mean(frame)


# --- 10: determinism and round-trips -----------------------------------------


@criterion(10, "determinism and round-trips")
def test_pipeline_rerun_byte_identical(tmp_path, record_property):
    corpus = synthesize_corpus(SynthSpec(num_videos=2, num_val_videos=1, frames_per_video=48, image_size=(16, 16)))
    cfg = resolve_config({"frame_model": {"image_size": [16, 16], "feature_dim": 16, "width": 4},
                          "temporal_model": {"hidden_size": 8},
                          "training": {"max_epochs": 1, "patience": 1, "learning_rate": 1e-3}})
    a = run_pipeline(corpus, cfg, tmp_path / "a")
    b = run_pipeline(corpus, cfg, tmp_path / "b")
    assert public_report(a) == public_report(b)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    record_property("detail", f"{len(files)} run files identical")


@criterion(10, "determinism and round-trips")
def test_checkpoint_round_trip(tmp_path):
    data = _small_frame_data(shared_fraction=0.0)
    train_teacher("frame", data, SMALL_SPEC, _tcfg(max_epochs=1, patience=1), CFG8, out_dir=tmp_path / "t")
    first = tmp_path / "t" / "best.ckpt"
    save_checkpoint(tmp_path / "again.ckpt", load_checkpoint(first))
    assert (tmp_path / "again.ckpt").read_bytes() == first.read_bytes()


@criterion(10, "determinism and round-trips")
def test_manifest_and_feature_store_round_trip(tmp_path):
    records = _skewed_manifest()[::7]
    write_manifest(tmp_path / "m.csv", records)
    assert load_manifest(tmp_path / "m.csv") == records
    write_manifest(tmp_path / "m2.csv", load_manifest(tmp_path / "m.csv"))
    assert (tmp_path / "m.csv").read_bytes() == (tmp_path / "m2.csv").read_bytes()
    feats = np.random.default_rng(0).normal(size=(len(records), 12)).astype(np.float32)
    index = [(r.video_id, r.frame_index) for r in records]
    write_feature_store(tmp_path / "f.mtlf", feats, index)
    stored, stored_index = read_feature_store(tmp_path / "f.mtlf")
    assert stored.dtype == feats.dtype and np.array_equal(stored, feats) and stored_index == index
