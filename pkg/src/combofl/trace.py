"""Line-delimited JSON traces and timelines.

Every file starts with a header line carrying a ``schema`` tag; readers
refuse schemas they do not know.  Records are written with sorted keys and
compact separators so identical runs give identical bytes.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator

TRACE_SCHEMA = "combofl-trace/1"
TIMELINE_SCHEMA = "combofl-timeline/1"


class TraceFormatError(ValueError):
    pass


def dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"), allow_nan=False)


class JsonlWriter:
    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", encoding="utf-8", newline="\n")

    def write(self, rec: dict) -> None:
        self._fh.write(dumps(rec))
        self._fh.write("\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def iter_jsonl(path, schema: str) -> Iterator[dict]:
    """Yield records of a JSONL file, header first, checking its schema."""
    first = True
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"{path}:{lineno}: malformed record ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise TraceFormatError(f"{path}:{lineno}: record is not an object")
            if first:
                first = False
                found = rec.get("schema")
                if found != schema:
                    raise TraceFormatError(
                        f"{path}:{lineno}: unsupported schema {found!r}, expected {schema!r}")
            elif "kind" not in rec:
                raise TraceFormatError(f"{path}:{lineno}: record without 'kind'")
            yield rec


def read_jsonl(path, schema: str) -> tuple[dict, list[dict]]:
    it = iter_jsonl(path, schema)
    try:
        header = next(it)
    except StopIteration:
        raise TraceFormatError(f"{path}: empty file") from None
    return header, list(it)


def read_trace(path) -> tuple[dict, list[dict]]:
    return read_jsonl(path, TRACE_SCHEMA)


def read_timeline(path) -> tuple[dict, list[dict]]:
    return read_jsonl(path, TIMELINE_SCHEMA)
