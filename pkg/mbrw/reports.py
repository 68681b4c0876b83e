"""Run manifests and deterministic JSON/CSV/text artifacts.

Every output file of a run is written under the run's ``--out`` directory
and references the manifest hash.  The hash covers only what determines the
results (command, arguments, input hashes, seed, version), so reruns with
the same inputs produce byte-identical outputs whatever the thread count or
wall clock.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from datetime import datetime
from datetime import timezone as _timezone
from pathlib import Path

from mbrw.errors import ArtifactError

UTC = _timezone.utc  # datetime.UTC alias, for Python < 3.11

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def dumps(doc: object) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=True) + "\n"


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def file_hash(path: str | Path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise ArtifactError(str(path), exc.strerror or "unreadable") from None


def _cell(value: object) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_text(manifest_hash: str, header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buf = io.StringIO()
    buf.write(f"# manifest: {manifest_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


@dataclass
class RunManifest:
    command: str
    arguments: dict
    seed: int
    version: str
    threads: int
    out_dir: str
    inputs: dict[str, str] = field(default_factory=dict)
    status: str = "running"
    started_at: str = ""
    finished_at: str | None = None
    outputs: list[str] = field(default_factory=list)
    error: str | None = None

    @property
    def hash(self) -> str:
        return sha256_text(
            dumps(
                {
                    "command": self.command,
                    "arguments": self.arguments,
                    "inputs": self.inputs,
                    "seed": self.seed,
                    "version": self.version,
                }
            )
        )

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "arguments": self.arguments,
            "inputs": self.inputs,
            "seed": self.seed,
            "version": self.version,
            "threads": self.threads,
            "out_dir": self.out_dir,
            "status": self.status,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "outputs": sorted(self.outputs),
            "manifest_hash": self.hash,
            "error": self.error,
        }


class RunArtifacts:
    """Writer for one run's output directory, manifest first."""

    def __init__(self, manifest: RunManifest) -> None:
        self.manifest = manifest
        self.root = Path(manifest.out_dir)

    def _write(self, name: str, text: str) -> Path:
        path = self.root / name
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        except OSError as exc:
            raise ArtifactError(str(path), exc.strerror or "unwritable") from None
        return path

    def _save_manifest(self) -> None:
        self._write(MANIFEST_NAME, dumps(self.manifest.to_dict()))

    def begin(self) -> None:
        self.manifest.started_at = datetime.now(UTC).isoformat()
        self.manifest.status = "running"
        self._save_manifest()
        logger.info(
            "run started",
            extra={"command": self.manifest.command, "manifest_hash": self.manifest.hash},
        )

    def write_json(self, name: str, doc: dict) -> Path:
        payload = dict(doc)
        payload["manifest_hash"] = self.manifest.hash
        path = self._write(name, dumps(payload))
        self.manifest.outputs.append(name)
        return path

    def write_csv(
        self, name: str, header: Sequence[str], rows: Iterable[Sequence[object]]
    ) -> Path:
        path = self._write(name, csv_text(self.manifest.hash, header, rows))
        self.manifest.outputs.append(name)
        return path

    def write_jsonl(self, name: str, records: Iterable[dict]) -> Path:
        """One compact JSON object per line, each carrying the manifest hash."""
        lines = [
            json.dumps({**rec, "manifest_hash": self.manifest.hash}, sort_keys=True) + "\n"
            for rec in records
        ]
        path = self._write(name, "".join(lines))
        self.manifest.outputs.append(name)
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self._write(name, f"# manifest: {self.manifest.hash}\n{text}")
        self.manifest.outputs.append(name)
        return path

    def finish(self, status: str = "complete", error: str | None = None) -> None:
        self.manifest.status = status
        self.manifest.error = error
        self.manifest.finished_at = datetime.now(UTC).isoformat()
        self._save_manifest()
        logger.info(
            "run finished",
            extra={"command": self.manifest.command, "status": status},
        )


def read_json(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ArtifactError(str(path), exc.strerror or "unreadable") from None
    except json.JSONDecodeError as exc:
        raise ArtifactError(str(path), f"invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ArtifactError(str(path), "expected a JSON object")
    return doc
