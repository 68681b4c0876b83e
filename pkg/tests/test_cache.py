"""Tests for the SQLite spectral cache."""

from __future__ import annotations

import pytest

from mbrw.errors import ArtifactError


async def test_miss_returns_none(cache):
    assert await cache.get("abc", "spectral", 1.0, 64) is None


async def test_put_then_get(cache):
    await cache.put("abc", "spectral", 1.0, 64, {"m_s": 2.5, "r": [1.0, 0.5]})
    assert await cache.get("abc", "spectral", 1.0, 64) == {"m_s": 2.5, "r": [1.0, 0.5]}
    assert await cache.get("abc", "spectral", 1.0, 128) is None
    assert await cache.get("abc", "spectral_dual", 1.0, 64) is None


async def test_put_overwrites(cache):
    await cache.put("abc", "boundary", 2.0, 64, {"alpha": 1.0})
    await cache.put("abc", "boundary", 2.0, 64, {"alpha": 2.0})
    assert await cache.get("abc", "boundary", 2.0, 64) == {"alpha": 2.0}
    assert await cache.count() == 1


async def test_unknown_kind_rejected(cache):
    with pytest.raises(ValueError, match="unknown cache kind"):
        await cache.put("abc", "mystery", 0.0, 64, {})


async def test_delete_model(cache):
    await cache.put("abc", "spectral", 1.0, 64, {})
    await cache.put("abc", "v_table", 0.0, 8, {})
    await cache.put("def", "spectral", 1.0, 64, {})
    assert await cache.delete_model("abc") == 2
    assert await cache.count() == 1


async def test_corrupt_entry_raises(cache):
    await cache.put("abc", "spectral", 1.0, 64, {})
    await cache._conn.execute("UPDATE artifacts SET payload = '{broken'")
    await cache._conn.commit()
    with pytest.raises(ArtifactError, match="corrupt cache entry"):
        await cache.get("abc", "spectral", 1.0, 64)


async def test_uninitialised_cache_raises(tmp_path):
    from mbrw.cache import SpectralCache

    store = SpectralCache(str(tmp_path / "x.db"))
    with pytest.raises(RuntimeError, match="not initialised"):
        await store.count()
