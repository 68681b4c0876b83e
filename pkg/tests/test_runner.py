from __future__ import annotations

import numpy as np
import pytest

from mbrw.runner import ReplicaPool
from mbrw.seeds import replica_rng


def _draw(replica: int, seed: int, size: int = 3) -> list[float]:
    return replica_rng(seed, replica).random(size).tolist()


def _square(replica: int) -> int:
    return replica * replica


class TestReplicaPool:
    def test_inline_order(self):
        with ReplicaPool(threads=1) as pool:
            assert pool.map(_square, 5) == [0, 1, 4, 9, 16]

    def test_kwargs_are_forwarded(self):
        with ReplicaPool() as pool:
            out = pool.map(_draw, 2, 11, size=1)
        assert len(out[0]) == 1

    def test_results_independent_of_threads(self):
        with ReplicaPool(threads=1) as serial:
            expected = serial.map(_draw, 20, 99)
        with ReplicaPool(threads=2, chunk_size=4) as parallel:
            got = parallel.map(_draw, 20, 99)
        np.testing.assert_array_equal(got, expected)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError, match="threads"):
            ReplicaPool(threads=0)
        with pytest.raises(ValueError, match="nonnegative"):
            ReplicaPool().map(_square, -1)

    def test_zero_replicas(self):
        assert ReplicaPool(threads=2).map(_square, 0) == []
