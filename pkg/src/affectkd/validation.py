"""Input checks for the array-level estimator API."""
from __future__ import annotations

import numpy as np

from .datakit import Part
from .losses import NUM_EXPR_CLASSES


class NotFittedError(RuntimeError):
    pass


def check_images(X, image_size=None) -> np.ndarray:
    """(n, h, w) float32 frames with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3:
        raise ValueError(f"expected images of shape (n, h, w), got {X.shape}")
    if image_size is not None and tuple(X.shape[1:]) != tuple(image_size):
        raise ValueError(f"expected {tuple(image_size)} images, got {X.shape[1:]}")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or inf")
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_sequences(X, input_dim=None) -> np.ndarray:
    """(k, L, d) float32 feature sequences."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 3:
        raise ValueError(f"expected sequences of shape (k, L, d), got {X.shape}")
    if input_dim is not None and X.shape[-1] != input_dim:
        raise ValueError(f"expected {input_dim}-d features, got {X.shape[-1]}")
    if not np.isfinite(X).all():
        raise ValueError("sequences contain NaN or inf")
    return X


def check_targets(y, shape: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Split ``y`` into (expr, va) aligned with ``shape`` (n,) or (k, L).

    ``y`` is a pair ``(expr, va)`` or a mapping with those keys. Missing
    expression labels are -1 (or None), missing VA rows NaN.
    """
    if isinstance(y, dict):
        expr, va = y.get("expr"), y.get("va")
    else:
        try:
            expr, va = y
        except (TypeError, ValueError):
            raise ValueError("y must be (expr, va) or {'expr': ..., 'va': ...}") from None
    expr = np.full(shape, -1, dtype=np.int64) if expr is None else np.asarray(
        [[-1 if v is None else v for v in row] for row in expr] if len(shape) == 2 else
        [-1 if v is None else v for v in expr], dtype=np.float64)
    va = np.full(shape + (2,), np.nan) if va is None else np.asarray(va, dtype=np.float64)
    if expr.shape != shape:
        raise ValueError(f"expr labels have shape {expr.shape}, expected {shape}")
    if va.shape != shape + (2,):
        raise ValueError(f"va labels have shape {va.shape}, expected {shape + (2,)}")
    if np.isnan(expr).any() or (expr != np.round(expr)).any():
        raise ValueError("expr labels must be integers (-1 for missing)")
    expr = expr.astype(np.int64)
    if ((expr < -1) | (expr >= NUM_EXPR_CLASSES)).any():
        raise ValueError(f"expr labels must lie in -1..{NUM_EXPR_CLASSES - 1}")
    if np.isinf(va).any():
        raise ValueError("va labels contain inf")
    partial = np.isnan(va).any(axis=-1) & ~np.isnan(va).all(axis=-1)
    if partial.any():
        raise ValueError("va rows must be fully present or fully NaN")
    with np.errstate(invalid="ignore"):
        if (np.abs(va) > 1).any():
            raise ValueError("va labels must lie in [-1, 1]")
    return expr, va.astype(np.float32)


def check_parts(part, n: int) -> np.ndarray:
    part = np.asarray(part)
    if part.shape != (n,):
        raise ValueError(f"part must have shape ({n},), got {part.shape}")
    valid = {int(p) for p in Part}
    if not set(np.unique(part).tolist()) <= valid:
        raise ValueError(f"part values must be in {sorted(valid)}")
    missing = valid - set(part.tolist())
    if missing:
        raise ValueError(f"every dataset part needs data; missing {sorted(missing)}")
    return part.astype(np.int64)


def check_label_consistency(expr, va, part):
    """Each item carries its part's label kinds (MIXED_VA may lack expr, MIXED_EXPR may lack VA)."""
    per_item_expr = (expr >= 0).reshape(len(part), -1).any(axis=1)
    per_item_va = (~np.isnan(va[..., 0])).reshape(len(part), -1).any(axis=1)
    if (~per_item_expr[part != Part.MIXED_VA]).any():
        raise ValueError("items of the expression and joint parts need expression labels")
    if (~per_item_va[part != Part.MIXED_EXPR]).any():
        raise ValueError("items of the VA and joint parts need VA labels")


def check_is_fitted(est, attr: str = "model_"):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted; call fit first")
