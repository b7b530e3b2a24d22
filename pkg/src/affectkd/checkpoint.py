"""Versioned checkpoint container around ``torch.save``."""
from __future__ import annotations

import dataclasses
import io
from pathlib import Path

import torch

from .losses import DistillationConfig
from .models import model_from_spec, spec_from_dict, spec_to_dict

FORMAT = "affectkd-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _to_bytes(payload: dict) -> bytes:
    buf = io.BytesIO()
    torch.save(payload, buf)
    return buf.getvalue()


def checkpoint_payload(model, role: str, dcfg: DistillationConfig, epoch: int = 0,
                       best_score: float | None = None, optimizer=None, extra: dict | None = None) -> dict:
    if role not in ("teacher", "student"):
        raise ValueError(f"role must be teacher or student, got {role!r}")
    return {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "role": role,
        "spec": spec_to_dict(model.spec),
        "distillation": dataclasses.asdict(dcfg),
        "epoch": int(epoch),
        "best_score": None if best_score is None else float(best_score),
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "extra": extra or {},
    }


def save_checkpoint(path, payload: dict) -> Path:
    path = Path(path)
    path.write_bytes(_to_bytes(payload))
    return path


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e.__class__.__name__})") from None
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an {FORMAT} file")
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('format_version')!r}")
    return payload


def model_from_checkpoint(payload: dict):
    """Rebuild the network described by a loaded checkpoint."""
    try:
        spec = spec_from_dict(payload["spec"])
        model = model_from_spec(spec)
        dtype = next(iter(payload["params"].values())).dtype
        model.to(dtype)
        model.load_state_dict(payload["params"])
    except (KeyError, TypeError, ValueError, RuntimeError) as e:
        raise CheckpointError(f"checkpoint parameters do not match its spec: {str(e).splitlines()[0]}") from None
    model.eval()
    return model


def load_model(path):
    payload = load_checkpoint(path)
    return model_from_checkpoint(payload), payload


def distillation_from(payload: dict) -> DistillationConfig:
    return DistillationConfig(**payload["distillation"])
