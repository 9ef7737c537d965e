"""Line-delimited JSON traces.

Every line is one record ``{"seq", "time", "kind", ...}`` serialized with
sorted keys. Floats keep full precision (JSON round-trips them exactly) so
the offline checker sees the same numbers the run used; only record times
are rounded onto the tick grid. Records are ordered by (time, seq) and seq
is strictly increasing.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import IO, Any, Callable, Dict, Iterator, List, Optional

SCHEMA_VERSION = 1
RECORD_KINDS = ("Header", "Tick", "Event", "Message", "TaskChange", "Violation", "End")
DIGITS = 6


class TraceError(ValueError):
    """Malformed trace; ``line`` is the first bad line (1-based)."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


def clean(value: Any) -> Any:
    """JSON-ready copy with enums and dataclasses flattened."""
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, bool) or value is None or isinstance(value, (int, str)):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            return None
        return 0.0 if value == 0 else value
    if isinstance(value, dict):
        return {str(k): clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [clean(v) for v in value]
    if hasattr(value, "__dataclass_fields__"):
        return {k: clean(getattr(value, k)) for k in value.__dataclass_fields__}
    raise TypeError(f"cannot serialize {type(value).__name__}")


def encode(record: Dict[str, Any]) -> str:
    return json.dumps(clean(record), sort_keys=True, separators=(",", ":"), allow_nan=False)


class TraceWriter:
    """Assigns seq numbers, enforces time order and forwards each record to ``sink``."""

    def __init__(self, out: Optional[IO[str]] = None, sink: Optional[Callable[[dict], None]] = None):
        self.out = out
        self.sink = sink
        self.seq = 0
        self.last_time = 0.0

    def write(self, kind: str, time: float, **payload) -> dict:
        if kind not in RECORD_KINDS:
            raise ValueError(f"unknown record kind {kind}")
        t = round(time, DIGITS)
        if t < self.last_time:
            raise ValueError(f"record at {t} precedes {self.last_time}")
        self.last_time = t
        self.seq += 1
        record = clean({**payload, "kind": kind, "seq": self.seq, "time": t})
        line = encode(record)
        if self.out is not None:
            self.out.write(line + "\n")
        if self.sink is not None:
            self.sink(record)
        return record


@dataclass
class Trace:
    header: dict
    records: List[dict]
    complete: bool

    def of_kind(self, *kinds: str) -> List[dict]:
        return [r for r in self.records if r["kind"] in kinds]

    @property
    def end_time(self) -> float:
        return self.records[-1]["time"] if self.records else 0.0


def iter_records(lines: Iterator[str]) -> Iterator[dict]:
    """Parse and validate records; raises TraceError at the first bad line."""
    prev_seq, prev_time = 0, -math.inf
    n = 0
    for n, raw in enumerate(lines, 1):
        if not raw.endswith("\n"):
            raise TraceError(n, "truncated record (no line terminator)")
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise TraceError(n, f"invalid JSON: {exc.msg}") from None
        if not isinstance(rec, dict):
            raise TraceError(n, "record is not an object")
        for key in ("seq", "time", "kind"):
            if key not in rec:
                raise TraceError(n, f"missing {key}")
        if rec["kind"] not in RECORD_KINDS:
            raise TraceError(n, f"unknown kind {rec['kind']!r}")
        if n == 1:
            if rec["kind"] != "Header":
                raise TraceError(n, "first record must be a Header")
            if rec.get("schema") != SCHEMA_VERSION:
                raise TraceError(n, f"unsupported schema {rec.get('schema')!r}")
        if not isinstance(rec["seq"], int) or rec["seq"] <= prev_seq:
            raise TraceError(n, "seq not strictly increasing")
        if not isinstance(rec["time"], (int, float)) or rec["time"] < prev_time:
            raise TraceError(n, "time goes backwards")
        if rec["kind"] == "TaskChange" and not all(k in rec for k in ("robot", "prior", "new", "cause")):
            raise TraceError(n, "TaskChange needs robot, prior, new and cause")
        prev_seq, prev_time = rec["seq"], rec["time"]
        yield rec
    if n == 0:
        raise TraceError(1, "empty trace")


def read_trace(path: str, require_end: bool = True) -> Trace:
    with open(path, encoding="utf-8") as fh:
        records = list(iter_records(iter(fh)))
    complete = records[-1]["kind"] == "End"
    if require_end and not complete:
        raise TraceError(len(records) + 1, "trace ends without an End record (truncated)")
    return Trace(records[0], records, complete)
