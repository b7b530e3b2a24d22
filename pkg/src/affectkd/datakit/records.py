"""Annotation records and the CSV manifest format."""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..losses import NUM_EXPR_CLASSES

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("frame_ref", "part", "expr", "valence", "arousal", "video_id", "frame_index")
NA = "NA"


class ManifestError(ValueError):
    pass


class Part(enum.IntEnum):
    """Dataset parts; the value matches the training task that part feeds."""

    MIXED_EXPR = 1
    MIXED_VA = 2
    EXPR_VA = 3


@dataclass(frozen=True)
class AnnotationRecord:
    frame_ref: str
    part: Part
    expr: int | None
    va: tuple[float, float] | None
    video_id: str
    frame_index: int

    @property
    def has_expr(self) -> bool:
        return self.expr is not None

    @property
    def has_va(self) -> bool:
        return self.va is not None

    @property
    def is_shared(self) -> bool:
        """A single-task part record that also carries the other label."""
        return self.part != Part.EXPR_VA and self.has_expr and self.has_va

    def expr_one_hot(self) -> np.ndarray:
        if self.expr is None:
            raise ValueError(f"{self.frame_ref} has no expression label")
        return np.eye(NUM_EXPR_CLASSES)[self.expr]

    def validate(self):
        if self.expr is not None and not 0 <= self.expr < NUM_EXPR_CLASSES:
            raise ValueError(f"expression class {self.expr} outside [0, 6]")
        if self.va is not None and not all(math.isfinite(v) for v in self.va):
            raise ValueError("valence/arousal must be finite")
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        if self.part in (Part.MIXED_EXPR, Part.EXPR_VA) and self.expr is None:
            raise ValueError(f"{self.part.name} record requires an expression label")
        if self.part in (Part.MIXED_VA, Part.EXPR_VA) and self.va is None:
            raise ValueError(f"{self.part.name} record requires valence/arousal")


def _parse_float(text: str, column: str, row: int) -> float | None:
    if text == NA:
        return None
    try:
        value = float(text)
    except ValueError:
        raise ManifestError(f"row {row}: column {column!r} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ManifestError(f"row {row}: column {column!r} is not finite")
    if not -1.0 <= value <= 1.0:
        logger.warning("row %d: %s=%s outside [-1, 1], clamped", row, column, text)
        value = min(max(value, -1.0), 1.0)
    return value


def parse_row(raw: dict, row: int) -> AnnotationRecord:
    try:
        part = Part[raw["part"]]
    except KeyError:
        raise ManifestError(f"row {row}: unknown part {raw['part']!r}") from None
    expr = None
    if raw["expr"] != NA:
        try:
            expr = int(raw["expr"])
        except ValueError:
            raise ManifestError(f"row {row}: expr must be 0-6 or NA, got {raw['expr']!r}") from None
    v = _parse_float(raw["valence"], "valence", row)
    a = _parse_float(raw["arousal"], "arousal", row)
    if (v is None) != (a is None):
        raise ManifestError(f"row {row}: valence and arousal must both be present or both NA")
    try:
        frame_index = int(raw["frame_index"])
    except ValueError:
        raise ManifestError(f"row {row}: frame_index must be an integer") from None
    rec = AnnotationRecord(raw["frame_ref"], part, expr, None if v is None else (v, a), raw["video_id"], frame_index)
    try:
        rec.validate()
    except ValueError as e:
        raise ManifestError(f"row {row}: {e}") from None
    return rec


def load_manifest(path) -> list[AnnotationRecord]:
    """Read a manifest CSV; rows are numbered from 1 after the header."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in MANIFEST_COLUMNS:
            if col not in header:
                raise ManifestError(f"missing required column {col!r} in {path}")
        return [parse_row(raw, i) for i, raw in enumerate(reader, start=1)]


def _fmt(value) -> str:
    return NA if value is None else repr(float(value))


def write_manifest(path, records) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            v, a = r.va if r.va is not None else (None, None)
            writer.writerow([r.frame_ref, r.part.name, NA if r.expr is None else r.expr,
                             _fmt(v), _fmt(a), r.video_id, r.frame_index])
    return path


def label_arrays(records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(expr, va, part) arrays with -1 / NaN marking missing labels."""
    expr = np.array([-1 if r.expr is None else r.expr for r in records], dtype=np.int64)
    va = np.array([(math.nan, math.nan) if r.va is None else r.va for r in records], dtype=np.float32).reshape(-1, 2)
    part = np.array([int(r.part) for r in records], dtype=np.int64)
    return expr, va, part
