from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .records import label_arrays


@dataclass
class ArrayDataset:
    """Model inputs with aligned labels, the form the trainer consumes.

    Frame data: ``x`` (n, h, w), ``expr`` (n,), ``va`` (n, 2).
    Sequence data: ``x`` (n, L, d), ``expr`` (n, L), ``va`` (n, L, 2), plus a
    ``mask`` (n, L) of real (non-padding) frames. ``part`` is per item.
    Missing labels: expr -1, va NaN.
    """

    x: np.ndarray
    expr: np.ndarray
    va: np.ndarray
    part: np.ndarray
    mask: np.ndarray | None = None
    frame_ids: list | None = None
    images: np.ndarray | None = None  # sequence frames, for sequence-level augmentation

    def __post_init__(self):
        n = len(self.x)
        if not (len(self.expr) == len(self.va) == len(self.part) == n):
            raise ValueError("dataset arrays are not aligned")
        if self.mask is None:
            self.mask = np.ones(self.expr.shape, dtype=bool)

    def __len__(self):
        return len(self.x)

    @property
    def is_sequence(self) -> bool:
        return self.expr.ndim == 2

    def frame_labels(self, rows=None):
        """(expr, va) of real frames, flattened across sequence positions."""
        rows = slice(None) if rows is None else rows
        keep = self.mask[rows].reshape(-1)
        return self.expr[rows].reshape(-1)[keep], self.va[rows].reshape(-1, 2)[keep]


def frame_dataset(records, frames) -> ArrayDataset:
    expr, va, part = label_arrays(records)
    return ArrayDataset(np.asarray(frames, dtype=np.float32), expr, va, part,
                        frame_ids=[r.frame_ref for r in records])


def sequence_dataset(samples) -> ArrayDataset:
    x = np.stack([s.features for s in samples]).astype(np.float32)
    labels = [label_arrays(s.records) for s in samples]
    expr = np.stack([lab[0] for lab in labels])
    va = np.stack([lab[1] for lab in labels])
    part = np.array([int(s.part) for s in samples], dtype=np.int64)
    mask = np.stack([s.mask for s in samples])
    ids = [r.frame_ref for s in samples for r, m in zip(s.records, s.mask) if m]
    images = None
    if all(s.images is not None for s in samples):
        images = np.stack([s.images for s in samples])
    return ArrayDataset(x, expr, va, part, mask, ids, images)
