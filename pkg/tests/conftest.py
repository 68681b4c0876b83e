"""Shared test fixtures."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
import pytest_asyncio

from mbrw import cone
from mbrw.cache import SpectralCache
from mbrw.model import ModelSpec, OffspringLaw, load_model
from mbrw.spectral import BoundaryData, DirectionGrid, calibrate_boundary

FIXTURES = Path(__file__).parent / "fixtures"

HALF = np.full((2, 2), 0.5)


def collinear_model(
    c: tuple[float, ...] = (1.0, math.e),
    weights: tuple[float, ...] = (0.7, 0.3),
    offspring: OffspringLaw | None = None,
    scale: float = 1.0,
) -> ModelSpec:
    """Atoms c_j * HALF.  Every child sits at the uniform direction and
    sigma = log(scale * c_j) whatever the parent, so the walk is one-dimensional."""
    return ModelSpec(
        d=2,
        offspring=offspring or OffspringLaw.deterministic(2),
        atoms=tuple(cj * HALF for cj in c),
        weights=weights,
        scale_lambda=scale,
        label="collinear",
    )


def scalar_log_m(spec: ModelSpec, s: float) -> float:
    """log m(s) for a collinear model, in closed form."""
    steps = [cone.op_norm(g) for g in spec.scaled_atoms]
    return math.log(
        spec.offspring_mean * sum(w * c**s for w, c in zip(spec.weights, steps, strict=True))
    )


def scalar_tilted_law(spec: ModelSpec, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """(probabilities, sigma values) of one tilted step of a collinear model."""
    sig = np.log([cone.op_norm(g) for g in spec.scaled_atoms])
    raw = np.asarray(spec.weights) * np.exp(alpha * sig)
    return raw / raw.sum(), sig


def spread_model() -> ModelSpec:
    """Three collinear atoms with log-sizes 0, 2 and 2 sqrt(2); the walk is non-lattice."""
    return collinear_model(
        c=(1.0, math.exp(2.0), math.exp(2.0 * math.sqrt(2.0))), weights=(0.5, 0.3, 0.2)
    )


def mixed_model() -> ModelSpec:
    return load_model(FIXTURES / "mixed.json")


@pytest.fixture
def collinear() -> ModelSpec:
    return collinear_model()


@pytest.fixture
def mixed() -> ModelSpec:
    return mixed_model()


@pytest.fixture(scope="session")
def collinear_boundary() -> tuple[ModelSpec, BoundaryData]:
    return calibrate_boundary(collinear_model(), grid=DirectionGrid.build(2, 64))


@pytest.fixture(scope="session")
def mixed_boundary() -> tuple[ModelSpec, BoundaryData]:
    return calibrate_boundary(mixed_model(), grid=DirectionGrid.build(2, 256))


@pytest.fixture(scope="session")
def spread_boundary() -> tuple[ModelSpec, BoundaryData]:
    return calibrate_boundary(spread_model(), grid=DirectionGrid.build(2, 64))


@pytest_asyncio.fixture
async def cache(tmp_path):
    store = SpectralCache(str(tmp_path / "cache.db"))
    await store.initialise()
    yield store
    await store.close()
