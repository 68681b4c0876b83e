from __future__ import annotations

import json

import pytest

from mbrw.errors import ArtifactError
from mbrw.reports import (
    MANIFEST_NAME,
    RunArtifacts,
    RunManifest,
    csv_text,
    dumps,
    read_json,
)


def _manifest(tmp_path, threads: int = 1, out: str = "run") -> RunManifest:
    return RunManifest(
        command="simulate",
        arguments={"depth": 5, "model": "m.json"},
        seed=7,
        version="0.1.0",
        threads=threads,
        out_dir=str(tmp_path / out),
        inputs={"model": "abc"},
    )


class TestManifest:
    def test_hash_ignores_threads_and_out_dir(self, tmp_path):
        assert _manifest(tmp_path).hash == _manifest(tmp_path, threads=8, out="other").hash

    def test_hash_tracks_arguments(self, tmp_path):
        changed = _manifest(tmp_path)
        changed.arguments["depth"] = 6
        assert changed.hash != _manifest(tmp_path).hash

    def test_lifecycle(self, tmp_path):
        run = RunArtifacts(_manifest(tmp_path))
        run.begin()
        doc = read_json(run.root / MANIFEST_NAME)
        assert doc["status"] == "running"
        run.write_json("summary.json", {"value": 1.5})
        run.finish("failed", "interrupted")
        doc = read_json(run.root / MANIFEST_NAME)
        assert doc["status"] == "failed"
        assert doc["error"] == "interrupted"
        assert doc["outputs"] == ["summary.json"]
        assert doc["finished_at"]


class TestWriters:
    def test_json_is_canonical(self, tmp_path):
        run = RunArtifacts(_manifest(tmp_path))
        path = run.write_json("a.json", {"b": 1, "a": [1.0, 2.0]})
        text = path.read_text()
        assert text == dumps({"a": [1.0, 2.0], "b": 1, "manifest_hash": run.manifest.hash})
        assert text.endswith("\n")

    def test_csv_carries_manifest_line(self, tmp_path):
        run = RunArtifacts(_manifest(tmp_path))
        path = run.write_csv("m.csv", ["n", "value"], [(0, 1.0), (1, 0.1)])
        lines = path.read_text().splitlines()
        assert lines[0] == f"# manifest: {run.manifest.hash}"
        assert lines[1:] == ["n,value", "0,1.0", "1,0.1"]

    def test_csv_floats_round_trip(self):
        text = csv_text("h", ["x"], [(1 / 3,)])
        assert float(text.splitlines()[-1]) == 1 / 3

    def test_jsonl(self, tmp_path):
        run = RunArtifacts(_manifest(tmp_path))
        path = run.write_jsonl("spine.jsonl", [{"k": 1}, {"k": 2}])
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert [r["k"] for r in records] == [1, 2]
        assert all(r["manifest_hash"] == run.manifest.hash for r in records)

    def test_reruns_are_byte_identical(self, tmp_path):
        outputs = []
        for threads in (1, 4):
            run = RunArtifacts(_manifest(tmp_path, threads=threads, out=f"t{threads}"))
            outputs.append(run.write_json("s.json", {"x": 0.1}).read_bytes())
        assert outputs[0] == outputs[1]

    def test_text(self, tmp_path):
        run = RunArtifacts(_manifest(tmp_path))
        path = run.write_text("r.txt", "biggins: pass\n")
        assert path.read_text().splitlines()[1] == "biggins: pass"


class TestReadJson:
    def test_missing(self, tmp_path):
        with pytest.raises(ArtifactError):
            read_json(tmp_path / "absent.json")

    def test_not_an_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        with pytest.raises(ArtifactError, match="JSON object"):
            read_json(path)
