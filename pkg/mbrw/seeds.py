"""Replica-indexed random streams derived from one master seed.

The derivation is frozen: stream ``i`` of master seed ``m`` is seeded with the
64-bit word produced by the splitmix64 finalizer applied to
``m + (i + 1) * GOLDEN``.  Results therefore depend only on (master seed,
replica index), never on how replicas are scheduled across workers.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(value: int) -> int:
    z = value & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stream_seed(master: int, index: int) -> int:
    """Return the seed word of stream ``index``."""
    if index < 0:
        raise ValueError(f"stream index must be nonnegative, got: {index}")
    return splitmix64((master + (index + 1) * GOLDEN) & _MASK)


def replica_rng(master: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(master, index)))


def child_seed(master: int, label: str) -> int:
    """Derive an independent master seed for a named sub-computation."""
    acc = master & _MASK
    for ch in label.encode():
        acc = splitmix64(acc ^ ch)
    return acc
