"""Command-line entry point: ``affectkd <command> [options]``.

Exit status is 0 on success, 1 on invalid input or a failed run (one line
``ErrorClass: message`` on stderr) and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import trainer
from .checkpoint import load_checkpoint, load_model, model_from_checkpoint
from .config import ConfigError, TrainingConfig, load_config, parse_tasks, read_config_file
from .datakit import synthesize_corpus, write_corpus
from .metrics import PredictionSet, evaluate

logger = logging.getLogger("affectkd")

NA_TOKENS = ("", "NA", "na", "nan", "NaN", "None")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _tasks(value: str):
    try:
        return parse_tasks(value)
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _add_common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", metavar="PATH", default=None, help="YAML config file (default: built-in values)")
    p.add_argument("--seed", type=int, default=None, help="master seed (default: config value, else 0)")
    p.add_argument("--out", metavar="DIR", required=out_required, help="output directory (required)")
    p.add_argument("--tasks", type=_tasks, default=None, help="task set 1,2 or 1,2,3 (default: 1,2,3)")
    p.add_argument("--shared", type=_on_off, default=None, metavar="on|off",
                   help="use shared annotations in the student loss (default: on)")
    p.add_argument("--lambda", dest="lambda_weight", type=float, default=None,
                   help="supervision weight in the student loss (default: 0.6)")
    p.add_argument("--temperature", type=float, default=None, help="distillation temperature (default: 2.0)")
    p.add_argument("--bins", type=int, default=None, help="valence/arousal bins (default: 20)")
    p.add_argument("--epochs", type=int, default=None, help="max epochs (default: 40)")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress (default: off)")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for unset overrides whose help already names the fallback."""

    def _get_help_string(self, action):
        if action.default is None or "(default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="affectkd", description="Multitask affect teacher/student training.",
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="write a synthetic corpus", formatter_class=fmt)
    _add_common(p)

    for name, what in (("train-teacher", "train a teacher on ground truth"),
                       ("train-student", "train a student against a frozen teacher")):
        p = sub.add_parser(name, help=what, formatter_class=fmt)
        _add_common(p)
        p.add_argument("--data", metavar="DIR", required=True, help="corpus directory with train.csv, val.csv (required)")
        p.add_argument("--stage", choices=("frame", "temporal"), default="frame", help="model level")
        p.add_argument("--frame-model", metavar="CKPT", default=None,
                       help="frame checkpoint supplying features, temporal stage only (default: none)")
        if name == "train-student":
            p.add_argument("--teacher", metavar="CKPT", required=True, help="teacher checkpoint (required)")

    p = sub.add_parser("extract-features", help="write frame-model features as feature stores", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--data", metavar="DIR", required=True, help="corpus directory (required)")
    p.add_argument("--model", metavar="CKPT", required=True, help="frame model checkpoint (required)")

    p = sub.add_parser("train-temporal", help="temporal teacher then student on frame-model features",
                       formatter_class=fmt)
    _add_common(p)
    p.add_argument("--data", metavar="DIR", required=True, help="corpus directory (required)")
    p.add_argument("--frame-model", metavar="CKPT", required=True, help="frame model checkpoint (required)")

    p = sub.add_parser("evaluate", help="score predictions against ground truth", formatter_class=fmt)
    p.add_argument("--pred", metavar="CSV", required=True, help="predictions with frame_ref, expr, valence, arousal (required)")
    p.add_argument("--truth", metavar="CSV", required=True, help="ground truth, same columns; a manifest also works (required)")
    p.add_argument("--out", metavar="PATH", default=None, help="write the report JSON here (default: print only)")
    p.add_argument("--average", choices=("macro", "weighted"), default="macro", help="F1 averaging")

    p = sub.add_parser("run-pipeline", help="all four stages end to end", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--data", metavar="DIR", default=None, help="corpus directory (default: synthesize one from the config)")
    return parser


def resolve(args):
    overrides = {
        "synth": {"seed": args.seed},
        "training": {"seed": args.seed, "tasks": args.tasks, "use_shared_annotations": args.shared,
                     "max_epochs": args.epochs},
        "distillation": {"lambda_weight": args.lambda_weight, "temperature": args.temperature,
                         "num_bins": args.bins},
    }
    if args.epochs is not None:
        # a small epoch budget shrinks patience with it rather than failing validation
        file_training = (read_config_file(args.config) if args.config else {}).get("training", {})
        overrides["training"]["patience"] = min(file_training.get("patience", TrainingConfig.patience), args.epochs)
    return load_config(args.config, overrides)


def _frame_data(args, cfg):
    return trainer.load_frame_data(args.data, cfg.frame_model.image_size)


def _stage_data(args, cfg):
    fd = _frame_data(args, cfg)
    if args.stage == "frame":
        return fd.arrays()
    if not args.frame_model:
        raise ConfigError("--frame-model is required for the temporal stage")
    frame_model, _ = load_model(args.frame_model)
    return trainer.sequence_data(frame_model, fd, cfg.training, keep_images=cfg.training.augment)


def _stage_spec(args, cfg):
    return cfg.frame_model if args.stage == "frame" else cfg.temporal_model




def cmd_gen_data(args):
    cfg = resolve(args)
    out = write_corpus(synthesize_corpus(cfg.synth), args.out)
    (out / "config.snapshot").write_text(cfg.snapshot(), encoding="utf-8")
    print(f"wrote corpus to {out}")


def cmd_train_teacher(args):
    cfg = resolve(args)
    data = _stage_data(args, cfg)
    _, rec = trainer.train_teacher(args.stage, data, _stage_spec(args, cfg), cfg.training, cfg.distillation,
                                   out_dir=args.out, snapshot=cfg.to_dict())
    _print(trainer.stage_summary(rec))


def cmd_train_student(args):
    cfg = resolve(args)
    teacher = model_from_checkpoint(load_checkpoint(args.teacher))
    data = _stage_data(args, cfg)
    _, rec = trainer.train_student(args.stage, data, teacher, cfg.training, cfg.distillation,
                                   spec=_stage_spec(args, cfg), out_dir=args.out, snapshot=cfg.to_dict())
    _print(trainer.stage_summary(rec))


def cmd_extract_features(args):
    cfg = resolve(args)
    model, _ = load_model(args.model)
    fd = trainer.load_frame_data(args.data, model.spec.image_size)
    trainer.sequence_data(model, fd, cfg.training, keep_images=False, store_dir=args.out)
    print(f"wrote feature stores to {args.out}")


def cmd_train_temporal(args):
    cfg = resolve(args)
    args.stage = "temporal"
    data = _stage_data(args, cfg)
    out = Path(args.out)
    teacher, t_rec = trainer.train_teacher("temporal", data, cfg.temporal_model, cfg.training, cfg.distillation,
                                           out_dir=out / "temporal_teacher", snapshot=cfg.to_dict())
    _, s_rec = trainer.train_student("temporal", data, teacher, cfg.training, cfg.distillation,
                                     out_dir=out / "temporal_student", snapshot=cfg.to_dict())
    _print({"stages": {"temporal_teacher": trainer.stage_summary(t_rec),
                       "temporal_student": trainer.stage_summary(s_rec)}})


def cmd_run_pipeline(args):
    cfg = resolve(args)
    corpus = args.data if args.data else synthesize_corpus(cfg.synth)
    report = trainer.run_pipeline(corpus, cfg, args.out)
    print(json.dumps(trainer.public_report(report)["stages"], indent=2, sort_keys=True))


def _print(report: dict):
    print(json.dumps(report, indent=2, sort_keys=True))


def _cell(row: dict, col: str, path, line: int):
    if col not in row:
        raise ValueError(f"{path}: missing column {col!r}")
    text = (row[col] or "").strip()
    if text in NA_TOKENS:
        return None
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"{path} row {line}: {col} is not a number: {text!r}") from None


def read_label_csv(path) -> dict:
    """frame_ref -> (expr or None, (valence, arousal) or None)."""
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "frame_ref" not in reader.fieldnames:
            raise ValueError(f"{path}: missing column 'frame_ref'")
        for line, row in enumerate(reader, start=1):
            ref = row["frame_ref"]
            if ref in rows:
                raise ValueError(f"{path} row {line}: duplicate frame_ref {ref!r}")
            expr = _cell(row, "expr", path, line)
            v, a = _cell(row, "valence", path, line), _cell(row, "arousal", path, line)
            if (v is None) != (a is None):
                raise ValueError(f"{path} row {line}: valence and arousal must both be present or both NA")
            if expr is not None and expr != int(expr):
                raise ValueError(f"{path} row {line}: expr must be an integer class")
            rows[ref] = (None if expr is None else int(expr), None if v is None else (v, a))
    return rows


def cmd_evaluate(args):
    truth = read_label_csv(args.truth)
    pred = read_label_csv(args.pred)
    missing = [ref for ref in truth if ref not in pred]
    if missing:
        raise ValueError(f"no prediction for frame_ref {missing[0]!r} ({len(missing)} missing)")
    refs = list(truth)
    for ref in refs:
        p_expr, p_va = pred[ref]
        if (truth[ref][0] is not None and p_expr is None) or (truth[ref][1] is not None and p_va is None):
            raise ValueError(f"prediction for frame_ref {ref!r} lacks a value its ground truth has")
    preds = PredictionSet.from_lists(
        [truth[r][0] for r in refs], [pred[r][0] if pred[r][0] is not None else 0 for r in refs],
        [truth[r][1] for r in refs], [pred[r][1] if pred[r][1] is not None else (0.0, 0.0) for r in refs],
        refs,
    )
    report = evaluate(preds, average=args.average)
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "extract-features": cmd_extract_features,
    "train-temporal": cmd_train_temporal,
    "evaluate": cmd_evaluate,
    "run-pipeline": cmd_run_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ValueError, RuntimeError, OSError, KeyError) as e:
        msg = " ".join(str(e).split()) or repr(e)
        print(f"{type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
