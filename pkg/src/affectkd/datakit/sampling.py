from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..losses import Labels
from .records import Part, label_arrays


@dataclass
class BatchTriplet:
    """N records from each of the three parts, in part order."""

    parts: tuple

    def __post_init__(self):
        if len(self.parts) != 3:
            raise ValueError("a batch triplet has exactly three parts")
        sizes = {len(p) for p in self.parts}
        if len(sizes) != 1 or sizes.pop() < 2:
            raise ValueError("every part needs the same number N >= 2 of records")
        for part, recs in zip(Part, self.parts):
            for r in recs:
                if r.part != part:
                    raise ValueError(f"{r.frame_ref} tagged {r.part.name} sits in the {part.name} slot")
                r.validate()

    @property
    def n(self) -> int:
        return len(self.parts[0])

    def labels(self) -> tuple[Labels, Labels, Labels]:
        out = []
        for recs in self.parts:
            expr, va, _ = label_arrays(recs)
            out.append(Labels.from_arrays(expr, va))
        return tuple(out)


class TripletSampler:
    """Epoch-wise index triplets drawn without replacement from per-part pools.

    An epoch has ``min(pool size) // n`` steps; each pool is reshuffled at
    every epoch from ``(seed, epoch, part)``, so the sequence of batches is a
    pure function of the seed.
    """

    def __init__(self, pools: dict, n: int, seed: int = 0):
        if n < 2:
            raise ValueError("per-part batch size must be >= 2")
        self.pools = {p: np.asarray(pools[p]) for p in Part}
        for p, pool in self.pools.items():
            if len(pool) < n:
                raise ValueError(f"pool {p.name} has {len(pool)} items, fewer than N={n}")
        self.n = n
        self.seed = seed

    def __len__(self):
        return min(len(p) for p in self.pools.values()) // self.n

    def epoch(self, epoch: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        steps = len(self)
        orders = []
        for p in Part:
            rng = np.random.default_rng([self.seed, epoch, int(p)])
            orders.append(rng.permutation(self.pools[p])[: steps * self.n].reshape(steps, self.n))
        return [tuple(o[s] for o in orders) for s in range(steps)]


def sample_batch_triplet(pools: dict, n: int, rng: np.random.Generator) -> BatchTriplet:
    """Draw one triplet of records; ``pools`` maps Part to a list of records."""
    parts = []
    for p in Part:
        pool = pools[p]
        if len(pool) < n:
            raise ValueError(f"pool {p.name} has {len(pool)} records, fewer than N={n}")
        parts.append([pool[i] for i in rng.choice(len(pool), size=n, replace=False)])
    return BatchTriplet(tuple(parts))
