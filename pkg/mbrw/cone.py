"""Nonnegative matrices acting on the 1-norm simplex.

Matrices are plain ``numpy`` arrays of shape (d, d) and directions are arrays
of shape (d,) with nonnegative entries summing to one.  The batched helpers
take directions stacked as rows of an (n, d) array.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from mbrw.errors import ConditionError, InvariantViolation

logger = logging.getLogger(__name__)

DIRECTION_TOL = 1e-12
KAPPA_FLOOR = 1.0 + 1e-9
MAX_DIMENSION = 8


@dataclass(frozen=True, slots=True)
class FKConstants:
    kappa: float
    kappa_bar: float
    c0: float
    c1: float
    d: int

    @property
    def window(self) -> float:
        """Width of the two-sided reversed-walk bound, kappa_bar + log d."""
        return self.kappa_bar + math.log(self.d)

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "kappa_bar": self.kappa_bar,
            "c0": self.c0,
            "c1": self.c1,
            "d": self.d,
        }


# ------------------------------------------------------------------
# Validation
# ------------------------------------------------------------------


def as_matrix(g: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    """Return ``g`` as a float array after checking it is allowable."""
    arr = np.asarray(g, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ConditionError("allowable", f"expected a square matrix, got {arr.shape}")
    if arr.shape[0] < 2 or arr.shape[0] > MAX_DIMENSION:
        raise ConditionError(
            "allowable", f"dimension must be in [2, {MAX_DIMENSION}], got {arr.shape[0]}"
        )
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ConditionError("allowable", "entries must be finite and nonnegative")
    if not (np.all(arr.max(axis=0) > 0) and np.all(arr.max(axis=1) > 0)):
        raise ConditionError(
            "allowable", "every row and column needs a positive entry"
        )
    return arr


def as_direction(x: Sequence[float] | np.ndarray) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1 or np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ConditionError("direction", f"invalid direction {arr!r}")
    total = float(arr.sum())
    if abs(total - 1.0) > DIRECTION_TOL:
        raise ConditionError("direction", f"coordinates sum to {total!r}, not 1")
    return arr


def uniform_direction(d: int) -> np.ndarray:
    return np.full(d, 1.0 / d)


# ------------------------------------------------------------------
# Norms and action
# ------------------------------------------------------------------


def op_norm(g: np.ndarray) -> float:
    """Operator 1-norm on the cone: the largest column sum."""
    g = as_matrix(g)
    return float(g.sum(axis=0).max())


def iota(g: np.ndarray) -> float:
    """Smallest stretch on the cone: the smallest column sum."""
    g = as_matrix(g)
    return float(g.sum(axis=0).min())


def act(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Projective action g.x = gx / ||gx||."""
    v = np.asarray(g, dtype=float) @ np.asarray(x, dtype=float)
    norm = float(v.sum())
    if not norm > 0:
        raise InvariantViolation("act: image of a cone direction vanished", norm, 0.0)
    return v / norm


def cocycle(g: np.ndarray, x: np.ndarray) -> float:
    """Norm cocycle sigma(g, x) = log ||gx||."""
    v = np.asarray(g, dtype=float) @ np.asarray(x, dtype=float)
    return math.log(float(v.sum()))


def act_batch(
    g: np.ndarray, xs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one matrix to every row of ``xs``; returns (images, cocycles)."""
    v = xs @ np.asarray(g, dtype=float).T
    norms = v.sum(axis=1)
    return v / norms[:, None], np.log(norms)


def act_stacked(
    mats: np.ndarray, xs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Apply ``mats[i]`` to ``xs[i]`` row by row; returns (images, cocycles)."""
    v = np.einsum("nij,nj->ni", mats, xs)
    norms = v.sum(axis=1)
    return v / norms[:, None], np.log(norms)


def hilbert_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Hilbert projective metric between two strictly positive directions."""
    ratio = np.asarray(x, dtype=float) / np.asarray(y, dtype=float)
    return float(math.log(ratio.max() / ratio.min()))


def perron_root(g: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(g, dtype=float)))))


# ------------------------------------------------------------------
# Furstenberg-Kesten constants
# ------------------------------------------------------------------


def fk_constants(atoms: Sequence[np.ndarray], d: int) -> FKConstants:
    """Constants kappa, kappa_bar = 2 log kappa, c0 = kappa_bar, c1 = c0 + kappa_bar + log d.

    kappa is the largest entry ratio max(g) / min(g) over the atoms; an atom
    set whose entries are all equal is clamped to ``KAPPA_FLOOR``.
    """
    if not atoms:
        raise ConditionError("A1*", "no atoms given")
    kappa = 1.0
    for idx, atom in enumerate(atoms):
        g = as_matrix(atom)
        if g.shape != (d, d):
            raise ConditionError("A1*", f"atom {idx} has shape {g.shape}, expected d={d}")
        low = float(g.min())
        if low <= 0:
            raise ConditionError("A1*", f"atom {idx} has a zero entry")
        kappa = max(kappa, float(g.max()) / low)
    if kappa < KAPPA_FLOOR:
        logger.debug("kappa clamped", extra={"kappa": kappa})
        kappa = KAPPA_FLOOR
    kappa_bar = 2.0 * math.log(kappa)
    c0 = kappa_bar
    return FKConstants(
        kappa=kappa,
        kappa_bar=kappa_bar,
        c0=c0,
        c1=c0 + kappa_bar + math.log(d),
        d=d,
    )
