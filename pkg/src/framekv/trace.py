"""Line-delimited retention trace with a running SHA-256.

Events are plain dicts serialized with sorted keys and compact separators so
two runs that make the same decisions produce byte-identical traces. The
policy name is deliberately not part of the event stream; it lives in the run
manifest, which lets structurally equivalent policies be compared by hash.
"""

from __future__ import annotations

import hashlib
import json
from typing import IO, Iterable


def encode_event(event: dict) -> bytes:
    return json.dumps(event, sort_keys=True, separators=(",", ":")).encode() + b"\n"


class RetentionTrace:
    def __init__(self, sink: IO[bytes] | None = None, keep: bool = True):
        self.sink = sink
        self.keep = keep
        self.events: list[dict] = []
        self.count = 0
        self._hash = hashlib.sha256()

    def emit(self, event: dict) -> None:
        line = encode_event(event)
        self._hash.update(line)
        self.count += 1
        if self.sink is not None:
            self.sink.write(line)
        if self.keep:
            self.events.append(event)

    def extend(self, events: Iterable[dict]) -> None:
        for e in events:
            self.emit(e)

    def hexdigest(self) -> str:
        return self._hash.hexdigest()

    def of_kind(self, kind: str) -> list[dict]:
        return [e for e in self.events if e.get("ev") == kind]


def write_header(sink: IO[bytes], header: dict) -> None:
    """Comment line carrying run metadata; not part of the event hash."""
    sink.write(b"# " + json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")


def read_trace(path) -> list[dict]:
    with open(path, "rb") as f:
        return [json.loads(line) for line in f if line.strip() and not line.startswith(b"#")]
