"""Oversampling of each dataset part towards uniform label frequencies.

Expression-labelled parts (MIXED_EXPR, EXPR_VA) are balanced over the seven
classes, the MIXED_VA part over uniform valence bins. Every group is topped
up to the size of the largest one by cycling through fresh shuffles of that
group, so copies are spread evenly; originals are never dropped.
"""
from __future__ import annotations

import logging

import numpy as np

from ..losses import va_bin_index
from .records import Part, label_arrays

logger = logging.getLogger(__name__)


def _group_keys(part: Part, expr: np.ndarray, va: np.ndarray, num_bins: int) -> np.ndarray:
    if part == Part.MIXED_VA:
        return va_bin_index(va[:, 0].astype(np.float64), num_bins).numpy()
    return expr


def oversample(keys: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices into ``keys`` (with repeats) giving every key the same count."""
    groups = {k: np.flatnonzero(keys == k) for k in np.unique(keys)}
    if len(groups) < 2:
        logger.warning("only one label group present; pool left unbalanced")
        return np.arange(len(keys))
    target = max(len(g) for g in groups.values())
    chosen = [np.arange(len(keys))]
    for k in sorted(groups):
        g = groups[k]
        missing = target - len(g)
        reps = -(-missing // len(g))
        if missing:
            extra = np.concatenate([rng.permutation(g) for _ in range(reps)])[:missing]
            chosen.append(extra)
    return rng.permutation(np.concatenate(chosen))


def balanced_pools(expr, va, part, num_bins: int = 20, seed: int = 0) -> dict[Part, np.ndarray]:
    """Per-part index pools into the given label arrays after oversampling."""
    expr, va, part = np.asarray(expr), np.asarray(va), np.asarray(part)
    pools = {}
    for p in Part:
        idx = np.flatnonzero(part == p)
        if idx.size == 0:
            raise ValueError(f"part {p.name} is empty")
        rng = np.random.default_rng([seed, int(p)])
        keys = _group_keys(p, expr[idx], va[idx], num_bins)
        pools[p] = idx[oversample(keys, rng)]
    return pools


def balance_parts(records, num_bins: int = 20, seed: int = 0) -> list:
    """Record-level view of :func:`balanced_pools`: parts concatenated in order."""
    expr, va, part = label_arrays(records)
    pools = balanced_pools(expr, va, part, num_bins, seed)
    return [records[i] for p in Part for i in pools[p]]


def group_counts(records, part: Part, num_bins: int = 20) -> dict:
    """Label-group sizes of one part, by class or valence bin."""
    sel = [r for r in records if r.part == part]
    expr, va, _ = label_arrays(sel)
    keys, counts = np.unique(_group_keys(part, expr, va, num_bins), return_counts=True)
    return dict(zip(keys.tolist(), counts.tolist()))
