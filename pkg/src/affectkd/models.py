"""Frame-level multitask network and the bidirectional GRU sequence model."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .losses import NUM_EXPR_CLASSES, FrameModelOutput

BACKBONES = ("toy_conv", "resnet50_style")


@dataclass(frozen=True)
class FrameModelSpec:
    backbone: str = "toy_conv"
    feature_dim: int = 64
    num_bins: int = 20
    image_size: tuple = (32, 32)
    width: int = 8  # toy_conv channels per block: w, 2w, 4w, 4w

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        min_side = 16 if self.backbone == "toy_conv" else 32
        if len(self.image_size) != 2 or min(self.image_size) < min_side:
            raise ValueError(f"{self.backbone} needs images of at least {min_side}x{min_side}, got {self.image_size}")
        if self.feature_dim < 1 or self.num_bins < 2 or self.width < 1:
            raise ValueError("feature_dim and width must be >= 1, num_bins >= 2")


@dataclass(frozen=True)
class TemporalModelSpec:
    input_dim: int = 64
    hidden_size: int = 128
    num_layers: int = 1
    num_bins: int = 20
    input_norm: bool = True  # LayerNorm on the incoming frame features
    skip: bool = True  # heads also see the frame features, not only the GRU state

    def __post_init__(self):
        if min(self.input_dim, self.hidden_size, self.num_layers) < 1 or self.num_bins < 2:
            raise ValueError("temporal model sizes must be positive and num_bins >= 2")


class MultitaskHeads(nn.Module):
    """Separate linear heads: 7 expression logits and 2 x B valence/arousal bin logits."""

    def __init__(self, in_dim: int, num_bins: int):
        super().__init__()
        self.num_bins = num_bins
        self.expr = nn.Linear(in_dim, NUM_EXPR_CLASSES)
        self.va = nn.Linear(in_dim, 2 * num_bins)

    def forward(self, h: torch.Tensor) -> FrameModelOutput:
        va = self.va(h)
        return FrameModelOutput(self.expr(h), va.view(*va.shape[:-1], 2, self.num_bins))


def _conv_block(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


class ToyConv(nn.Module):
    def __init__(self, feature_dim: int, width: int = 8):
        super().__init__()
        w = (width, 2 * width, 4 * width, 4 * width)
        self.body = nn.Sequential(
            _conv_block(1, w[0]), _conv_block(w[0], w[1]), _conv_block(w[1], w[2]), _conv_block(w[2], w[3]),
            nn.AdaptiveAvgPool2d(2), nn.Flatten(),
        )
        self.proj = nn.Sequential(nn.Linear(w[3] * 4, feature_dim), nn.ReLU(inplace=True))

    def forward(self, x):
        return self.proj(self.body(x))


class ResNet50Style(nn.Module):
    def __init__(self, feature_dim: int):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        net.fc = nn.Identity()
        self.net = net
        self.proj = nn.Sequential(nn.Linear(2048, feature_dim), nn.ReLU(inplace=True))

    def forward(self, x):
        return self.proj(self.net(x.expand(-1, 3, -1, -1)))


class FrameModel(nn.Module):
    """Backbone, penultimate feature vector, then the two task heads."""

    def __init__(self, spec: FrameModelSpec):
        super().__init__()
        self.spec = spec
        if spec.backbone == "toy_conv":
            self.backbone = ToyConv(spec.feature_dim, spec.width)
        else:
            self.backbone = ResNet50Style(spec.feature_dim)
        self.heads = MultitaskHeads(spec.feature_dim, spec.num_bins)

    def forward(self, images: torch.Tensor):
        """``images``: (n, h, w) or (n, 1, h, w) in [0, 1]. Returns (outputs, features)."""
        if images.dim() == 3:
            images = images.unsqueeze(1)
        if tuple(images.shape[-2:]) != self.spec.image_size or images.shape[1] != 1:
            raise ValueError(f"expected (n, 1, {self.spec.image_size[0]}, {self.spec.image_size[1]}) images, "
                             f"got {tuple(images.shape)}")
        feats = self.backbone(images)
        return self.heads(feats), feats


class TemporalModel(nn.Module):
    """Bidirectional GRU over per-frame features, heads applied at every step."""

    def __init__(self, spec: TemporalModelSpec):
        super().__init__()
        self.spec = spec
        self.norm = nn.LayerNorm(spec.input_dim) if spec.input_norm else nn.Identity()
        self.gru = nn.GRU(spec.input_dim, spec.hidden_size, num_layers=spec.num_layers,
                          batch_first=True, bidirectional=True)
        head_dim = 2 * spec.hidden_size + (spec.input_dim if spec.skip else 0)
        self.heads = MultitaskHeads(head_dim, spec.num_bins)

    def forward(self, features: torch.Tensor):
        """``features``: (k, L, input_dim). Returns per-frame outputs (k, L, ...) and GRU states."""
        if features.dim() != 3 or features.shape[-1] != self.spec.input_dim:
            raise ValueError(f"expected (k, L, {self.spec.input_dim}) features, got {tuple(features.shape)}")
        x = self.norm(features)
        h, _ = self.gru(x)
        if self.spec.skip:
            h = torch.cat([h, x], dim=-1)
        return self.heads(h), h


def _seeded_build(cls, spec, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return cls(spec)


def build_frame_model(spec: FrameModelSpec, seed: int = 0) -> FrameModel:
    return _seeded_build(FrameModel, spec, seed)


def build_temporal_model(spec: TemporalModelSpec, seed: int = 0) -> TemporalModel:
    return _seeded_build(TemporalModel, spec, seed)


def model_from_spec(spec, seed: int = 0) -> nn.Module:
    if isinstance(spec, FrameModelSpec):
        return build_frame_model(spec, seed)
    if isinstance(spec, TemporalModelSpec):
        return build_temporal_model(spec, seed)
    raise TypeError(f"not a model spec: {spec!r}")


def spec_to_dict(spec) -> dict:
    d = dataclasses.asdict(spec)
    d["kind"] = "frame" if isinstance(spec, FrameModelSpec) else "temporal"
    if "image_size" in d:
        d["image_size"] = list(d["image_size"])
    return d


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    return FrameModelSpec(**d) if kind == "frame" else TemporalModelSpec(**d)


@torch.no_grad()
def predict_outputs(model: nn.Module, x, batch_size: int = 256):
    """Evaluation-mode forward over ``x`` in chunks; returns (FrameModelOutput, features)."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    outs, feats = [], []
    try:
        for start in range(0, len(x), batch_size):
            chunk = torch.as_tensor(np.asarray(x[start:start + batch_size]), dtype=dtype)
            out, f = model(chunk)
            outs.append(out)
            feats.append(f)
    finally:
        model.train(was_training)
    return (FrameModelOutput(torch.cat([o.expr_logits for o in outs]), torch.cat([o.va_logits for o in outs])),
            torch.cat(feats))


def frame_forward(model: FrameModel, images):
    """Deterministic inference on a batch of images: (outputs, penultimate features)."""
    return predict_outputs(model, images)


def temporal_forward(model: TemporalModel, sequences):
    """Per-frame outputs for a batch of sequences (SequenceSample list or (k, L, d) array)."""
    if len(sequences) and hasattr(sequences[0], "features"):
        sequences = np.stack([s.features for s in sequences])
    return predict_outputs(model, sequences)


def extract_features(model: FrameModel, records, root, out_path=None, batch_size: int = 256):
    """Penultimate features of every manifest frame, optionally written as a feature store."""
    from .datakit import load_frames, write_feature_store

    frames = load_frames(records, root, model.spec.image_size)
    _, feats = predict_outputs(model, frames, batch_size)
    feats = feats.to(torch.float32).numpy()
    if out_path is not None:
        write_feature_store(out_path, feats, [(r.video_id, r.frame_index) for r in records])
    return feats
