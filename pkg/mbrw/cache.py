from __future__ import annotations

import json
import logging
from datetime import datetime
from datetime import timezone as _timezone
from pathlib import Path

import aiosqlite

from mbrw.errors import ArtifactError

UTC = _timezone.utc  # datetime.UTC alias, for Python < 3.11

logger = logging.getLogger(__name__)

_SCHEMA = """
CREATE TABLE IF NOT EXISTS artifacts (
    id          INTEGER PRIMARY KEY AUTOINCREMENT,
    model_hash  TEXT NOT NULL,
    kind        TEXT NOT NULL,
    s           REAL NOT NULL,
    grid_size   INTEGER NOT NULL,
    payload     TEXT NOT NULL,
    created_at  TEXT NOT NULL,
    UNIQUE(model_hash, kind, s, grid_size)
);
"""

KINDS = frozenset({"spectral", "spectral_dual", "boundary", "v_table"})


class SpectralCache:
    """Async SQLite store of computed eigen-data, boundary data and V tables.

    Entries are keyed by (model hash, kind, s, grid size) and hold the JSON
    form produced by the artifact's ``to_dict``.
    """

    def __init__(self, path: str) -> None:
        self._path = path
        self._db: aiosqlite.Connection | None = None

    @property
    def _conn(self) -> aiosqlite.Connection:
        """Return the active connection, raising if not yet initialised."""
        if self._db is None:
            raise RuntimeError("SpectralCache not initialised; call initialise() first")
        return self._db

    async def initialise(self) -> None:
        """Open the SQLite connection and create tables."""
        Path(self._path).parent.mkdir(parents=True, exist_ok=True)
        self._db = await aiosqlite.connect(self._path)
        self._db.row_factory = aiosqlite.Row
        await self._db.execute("PRAGMA journal_mode=WAL")
        await self._db.executescript(_SCHEMA)
        await self._db.commit()
        logger.info("cache initialised", extra={"path": self._path})

    async def close(self) -> None:
        if self._db is not None:
            await self._db.close()
            self._db = None

    async def put(
        self, model_hash: str, kind: str, s: float, grid_size: int, payload: dict
    ) -> None:
        """Store or replace one artifact."""
        if kind not in KINDS:
            raise ValueError(f"unknown cache kind {kind!r}")
        now = datetime.now(UTC).isoformat()
        await self._conn.execute(
            """INSERT INTO artifacts (model_hash, kind, s, grid_size, payload, created_at)
               VALUES (?, ?, ?, ?, ?, ?)
               ON CONFLICT(model_hash, kind, s, grid_size)
               DO UPDATE SET payload = excluded.payload, created_at = excluded.created_at""",
            (model_hash, kind, float(s), grid_size, json.dumps(payload, sort_keys=True), now),
        )
        await self._conn.commit()
        logger.debug(
            "artifact cached",
            extra={"model_hash": model_hash[:12], "kind": kind, "s": s, "grid_size": grid_size},
        )

    async def get(
        self, model_hash: str, kind: str, s: float, grid_size: int
    ) -> dict | None:
        """Return the stored payload, or None on a miss."""
        async with self._conn.execute(
            """SELECT payload FROM artifacts
               WHERE model_hash = ? AND kind = ? AND s = ? AND grid_size = ?""",
            (model_hash, kind, float(s), grid_size),
        ) as cur:
            row = await cur.fetchone()
        if row is None:
            return None
        try:
            return json.loads(row["payload"])
        except json.JSONDecodeError as exc:
            raise ArtifactError(self._path, f"corrupt cache entry ({kind}): {exc.msg}") from None

    async def delete_model(self, model_hash: str) -> int:
        """Drop every artifact of one model; returns the number removed."""
        cur = await self._conn.execute(
            "DELETE FROM artifacts WHERE model_hash = ?", (model_hash,)
        )
        await self._conn.commit()
        return cur.rowcount

    async def count(self) -> int:
        async with self._conn.execute("SELECT COUNT(*) FROM artifacts") as cur:
            row = await cur.fetchone()
        return int(row[0]) if row else 0
