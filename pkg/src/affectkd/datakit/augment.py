from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    max_shift: float = 0.1  # fraction of each image side
    flip_prob: float = 0.5


def draw_params(rng, height: int, width: int, cfg: AugmentConfig = AugmentConfig()):
    """One (dy, dx, flip) draw; offsets are uniform integers in +-max_shift of each side."""
    my, mx = int(cfg.max_shift * height), int(cfg.max_shift * width)
    dy = int(rng.integers(-my, my + 1))
    dx = int(rng.integers(-mx, mx + 1))
    flip = bool(rng.random() < cfg.flip_prob)
    return dy, dx, flip


def shift_flip(frames: np.ndarray, dy: int, dx: int, flip: bool) -> np.ndarray:
    """Translate the last two axes by (dy, dx) with edge padding, then optionally mirror."""
    h, w = frames.shape[-2:]
    pad = [(0, 0)] * (frames.ndim - 2) + [(abs(dy), abs(dy)), (abs(dx), abs(dx))]
    padded = np.pad(frames, pad, mode="edge")
    y0, x0 = abs(dy) - dy, abs(dx) - dx
    out = padded[..., y0:y0 + h, x0:x0 + w]
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment(sample, rng, cfg: AugmentConfig = AugmentConfig()):
    """Random translation plus horizontal flip; labels are untouched.

    ``sample`` is a single (h, w) image or a SequenceSample carrying frame
    images. A sequence gets one draw shared by all of its frames.
    """
    if isinstance(sample, np.ndarray):
        if sample.ndim != 2:
            raise ValueError("augment expects a single (h, w) image; use augment_batch for stacks")
        return shift_flip(sample, *draw_params(rng, *sample.shape, cfg))
    images = getattr(sample, "images", None)
    if images is None:
        raise ValueError("sequence augmentation needs the frame images, not only features")
    params = draw_params(rng, *images.shape[-2:], cfg)
    return dataclasses.replace(sample, images=shift_flip(images, *params))


def augment_batch(images: np.ndarray, rng, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Independent draws for each leading item of ``images``.

    For (n, h, w) every image gets its own draw; for (n, T, h, w) every
    sequence gets one draw applied to all T frames.
    """
    out = np.empty_like(images)
    h, w = images.shape[-2:]
    for i in range(len(images)):
        out[i] = shift_flip(images[i], *draw_params(rng, h, w, cfg))
    return out
