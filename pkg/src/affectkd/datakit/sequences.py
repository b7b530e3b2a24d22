from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

SEQ_LEN = 32


@dataclass
class SequenceSample:
    """``seq_len`` consecutive frames of one video.

    A short tail window is padded by repeating its last real frame; ``mask``
    is False on padded positions so they stay out of losses and metrics.
    """

    features: np.ndarray
    records: list
    mask: np.ndarray
    video_id: str
    start_index: int
    images: np.ndarray | None = field(default=None, repr=False)

    @property
    def part(self):
        return self.records[0].part


def _windows(n: int, seq_len: int, stride: int):
    start = 0
    while start < n:
        yield start
        if start + seq_len >= n:
            break
        start += stride


def build_sequence_dataset(features, records, seq_len: int = SEQ_LEN, stride: int | None = None,
                           images=None) -> list[SequenceSample]:
    """Cut each video (sorted by frame_index) into fixed-length windows.

    Videos are emitted in sorted video_id order. Default stride equals
    ``seq_len``, which partitions every video's frames exactly once.
    """
    features = np.asarray(features)
    if len(features) != len(records):
        raise ValueError(f"{len(features)} feature rows for {len(records)} records")
    stride = seq_len if stride is None else stride
    if seq_len < 1 or stride < 1:
        raise ValueError("seq_len and stride must be positive")
    by_video = defaultdict(list)
    for i, r in enumerate(records):
        by_video[r.video_id].append(i)
    out = []
    for vid in sorted(by_video):
        rows = sorted(by_video[vid], key=lambda i: records[i].frame_index)
        if not rows:
            logger.warning("video %s has no frames, skipped", vid)
            continue
        for start in _windows(len(rows), seq_len, stride):
            take = rows[start:start + seq_len]
            real = len(take)
            take = take + [take[-1]] * (seq_len - real)
            mask = np.zeros(seq_len, dtype=bool)
            mask[:real] = True
            out.append(SequenceSample(
                features=features[take],
                records=[records[i] for i in take],
                mask=mask,
                video_id=vid,
                start_index=records[take[0]].frame_index,
                images=None if images is None else np.asarray(images)[take],
            ))
    return out
