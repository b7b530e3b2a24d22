"""Synthetic multi-part corpus with correlated expression and valence/arousal.

Each frame has a latent class and a (valence, arousal) pair drawn around a
class-specific mean, so the two tasks share information the way real affect
data does. Images are

    0.5 + 0.12 * (s * signal + noise) / sqrt(s**2 * var(signal) + 1)

where ``signal`` is a class template plus valence/arousal templates, a
per-video "identity" pattern acts as nuisance, and ``s`` is
``class_signal_strength``. All templates are left-right symmetric, so
horizontal flips preserve labels.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .records import AnnotationRecord, Part, write_manifest
from .stores import write_image_store

# neutral, anger, disgust, fear, happiness, sadness, surprise
CLASS_PRIOR = np.array([0.30, 0.08, 0.05, 0.05, 0.28, 0.12, 0.12])
CLASS_VA_MEANS = np.array([
    [0.00, 0.00],
    [-0.55, 0.60],
    [-0.60, 0.25],
    [-0.45, 0.70],
    [0.65, 0.35],
    [-0.55, -0.45],
    [0.25, 0.75],
])
VA_SPREAD = 0.2
VA_TEMPLATE_WEIGHT = 1.5
IDENTITY_WEIGHT = 0.5
IMAGE_STORE = "images.mtli"
PART_TAGS = {Part.MIXED_EXPR: "expr", Part.MIXED_VA: "va", Part.EXPR_VA: "exprva"}


@dataclass(frozen=True)
class SynthSpec:
    num_videos: int | tuple = 14  # training videos per part (int or one per part)
    num_val_videos: int | tuple = 4
    frames_per_video: int = 128
    image_size: tuple = (32, 32)
    class_signal_strength: float = 3.0
    shared_fraction: float = 0.0
    temporal_dependence: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("num_videos", "num_val_videos"):
            v = getattr(self, name)
            counts = (v,) * 3 if isinstance(v, int) else tuple(v)
            if len(counts) != 3 or any(int(c) != c or c < 1 for c in counts):
                raise ValueError(f"{name} must be a positive int or three positive ints")
        if self.frames_per_video < 2:
            raise ValueError("frames_per_video must be >= 2")
        if len(self.image_size) != 2 or min(self.image_size) < 8:
            raise ValueError("image_size must be (h, w) with both >= 8")
        if not self.class_signal_strength >= 0:
            raise ValueError("class_signal_strength must be >= 0")
        if not 0 <= self.shared_fraction <= 1:
            raise ValueError("shared_fraction must lie in [0, 1]")

    def videos_per_part(self, split: str) -> tuple:
        v = self.num_videos if split == "train" else self.num_val_videos
        return (v,) * 3 if isinstance(v, int) else tuple(v)


@dataclass
class Corpus:
    train: list
    val: list
    images: np.ndarray  # uint8 (n, h, w), row k backs frame_ref "images.mtli#k"
    spec: SynthSpec
    templates: dict = dataclasses.field(repr=False, default_factory=dict)


def _smooth_symmetric(rng, n, h, w, sigma):
    """Random low-frequency fields, mirrored left-right, unit std each."""
    noise = rng.normal(size=(n, h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    kernel = np.exp(-2 * (np.pi * sigma) ** 2 * (fy ** 2 + fx ** 2))
    field = np.real(np.fft.ifft2(np.fft.fft2(noise) * kernel))
    field = field + field[..., ::-1]
    field -= field.mean(axis=(1, 2), keepdims=True)
    return field / field.std(axis=(1, 2), keepdims=True)


def make_templates(spec: SynthSpec) -> dict:
    h, w = spec.image_size
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    sigma = max(h, w) / 10
    return {
        "class": _smooth_symmetric(rng, 7, h, w, sigma),
        "va": _smooth_symmetric(rng, 2, h, w, sigma),
    }


def _video_labels(rng, n: int, temporal: bool):
    if not temporal:
        cls = rng.choice(7, size=n, p=CLASS_PRIOR)
        va = CLASS_VA_MEANS[cls] + rng.normal(0, VA_SPREAD, (n, 2))
        return cls, np.clip(va, -1, 1)
    cls = np.empty(n, dtype=np.int64)
    start = 0
    while start < n:
        seg = int(rng.integers(24, 65))
        cls[start:start + seg] = rng.choice(7, p=CLASS_PRIOR)
        start += seg
    # AR(1) drift around the class mean, stationary std VA_SPREAD
    rho = 0.9
    drift = np.empty((n, 2))
    drift[0] = rng.normal(0, VA_SPREAD, 2)
    step = VA_SPREAD * np.sqrt(1 - rho ** 2)
    for t in range(1, n):
        drift[t] = rho * drift[t - 1] + rng.normal(0, step, 2)
    return cls, np.clip(CLASS_VA_MEANS[cls] + drift, -1, 1)


def render(templates: dict, cls, va, identity, strength: float, rng) -> np.ndarray:
    """uint8 frames for per-frame classes/VA sharing one identity pattern."""
    signal = templates["class"][cls] + VA_TEMPLATE_WEIGHT * np.einsum("nk,khw->nhw", va, templates["va"])
    signal_var = 1.0 + VA_TEMPLATE_WEIGHT ** 2 * 2 * 0.3
    noise = rng.normal(size=signal.shape) + IDENTITY_WEIGHT * identity
    img = 0.5 + 0.12 * (strength * signal + noise) / np.sqrt(strength ** 2 * signal_var + 1 + IDENTITY_WEIGHT ** 2)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def synthesize_corpus(spec: SynthSpec) -> Corpus:
    templates = make_templates(spec)
    h, w = spec.image_size
    images, splits = [], {"train": [], "val": []}
    row = 0
    for split_no, split in enumerate(("train", "val")):
        for part, n_videos in zip(Part, spec.videos_per_part(split)):
            rng = np.random.default_rng([spec.seed, split_no, int(part)])
            shared = np.zeros(n_videos, dtype=bool)
            if part != Part.EXPR_VA:
                shared[rng.permutation(n_videos)[: int(round(spec.shared_fraction * n_videos))]] = True
            identities = _smooth_symmetric(rng, n_videos, h, w, max(h, w) / 8)
            for v in range(n_videos):
                cls, va = _video_labels(rng, spec.frames_per_video, spec.temporal_dependence)
                images.append(render(templates, cls, va, identities[v], spec.class_signal_strength, rng))
                vid = f"{split}-{PART_TAGS[part]}-{v:03d}"
                keep_expr = part != Part.MIXED_VA or shared[v]
                keep_va = part != Part.MIXED_EXPR or shared[v]
                for t in range(spec.frames_per_video):
                    splits[split].append(AnnotationRecord(
                        frame_ref=f"{IMAGE_STORE}#{row}",
                        part=part,
                        expr=int(cls[t]) if keep_expr else None,
                        va=(float(va[t, 0]), float(va[t, 1])) if keep_va else None,
                        video_id=vid,
                        frame_index=t,
                    ))
                    row += 1
    return Corpus(splits["train"], splits["val"], np.concatenate(images), spec, templates)


def write_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "train.csv", corpus.train)
    write_manifest(out / "val.csv", corpus.val)
    write_image_store(out / IMAGE_STORE, corpus.images)
    return out
