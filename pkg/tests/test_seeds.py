from __future__ import annotations

import numpy as np
import pytest

from mbrw.seeds import GOLDEN, child_seed, replica_rng, splitmix64, stream_seed


def test_splitmix64_reference_value():
    # First output of a splitmix64 generator seeded with 0.
    assert splitmix64(GOLDEN) == 0xE220A8397B1DCDAF


def test_stream_zero_of_seed_zero():
    assert stream_seed(0, 0) == 0xE220A8397B1DCDAF


def test_streams_are_distinct():
    seeds = {stream_seed(42, i) for i in range(1_000)}
    assert len(seeds) == 1_000


def test_negative_index_rejected():
    with pytest.raises(ValueError, match="nonnegative"):
        stream_seed(1, -1)


def test_replica_rng_depends_only_on_seed_and_index():
    a = replica_rng(7, 3).random(5)
    b = replica_rng(7, 3).random(5)
    c = replica_rng(7, 4).random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_child_seeds_differ_by_label():
    assert child_seed(7, "biggins:0.5") != child_seed(7, "biggins:1")
    assert child_seed(7, "v") == child_seed(7, "v")
    assert 0 <= child_seed(7, "v") < 2**64
