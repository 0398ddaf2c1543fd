"""Correctable-error log records: schema, JSONL parsing/serialization, filters.

On disk a CE log is UTF-8 text with one JSON object per line::

    {"ts": 100, "dimm": "D1", "type": "ce.read", "bank": 3, "row": 7, "col": 9}

``rank``, ``bank``, ``row`` and ``col`` may be absent (or null). The failure
list is a CSV file with header ``dimm,failure_time``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Sequence

DEFAULT_ERROR_TYPES = frozenset({"ce.read", "ce.scrub", "uce.read"})
DEFAULT_DROP_TYPES = frozenset({"uce.read"})
ADDRESS_FIELDS = ("bank", "row", "col")

_OPTIONAL_INT_FIELDS = ("rank", "bank", "row", "col")
_KNOWN_KEYS = frozenset({"ts", "dimm", "type", *_OPTIONAL_INT_FIELDS})


class CelogError(ValueError):
    """Raised for invalid records or geometry."""


@dataclass(frozen=True)
class Geometry:
    banks: int = 16
    rows: int = 131072
    columns: int = 1024

    def __post_init__(self) -> None:
        for name in ("banks", "rows", "columns"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise CelogError(f"geometry.{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True, slots=True)
class CeRecord:
    """One correctable-error event. ``ts`` is integer seconds since epoch."""

    ts: int
    dimm: str
    error_type: str
    rank: int | None = None
    bank: int | None = None
    row: int | None = None
    col: int | None = None

    def has_address(self, fields: Sequence[str] = ADDRESS_FIELDS) -> bool:
        return all(getattr(self, f) is not None for f in fields)

    def to_json(self) -> str:
        obj: dict[str, object] = {"ts": self.ts, "dimm": self.dimm, "type": self.error_type}
        for name in _OPTIONAL_INT_FIELDS:
            value = getattr(self, name)
            if value is not None:
                obj[name] = value
        return json.dumps(obj, separators=(",", ":"))


@dataclass(frozen=True)
class FailureRecord:
    dimm: str
    failure_time: int


@dataclass(frozen=True)
class LineError:
    line: int
    message: str


@dataclass
class ParseReport:
    records: list[CeRecord] = field(default_factory=list)
    errors: list[LineError] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def _is_int(value: object) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def record_from_obj(
    obj: object,
    error_types: frozenset[str] = DEFAULT_ERROR_TYPES,
    geometry: Geometry | None = None,
) -> CeRecord:
    """Validate a decoded JSON object and build a record; raises CelogError."""
    if not isinstance(obj, dict):
        raise CelogError("record is not a JSON object")
    unknown = set(obj) - _KNOWN_KEYS
    if unknown:
        raise CelogError(f"unknown field(s): {', '.join(sorted(unknown))}")
    if "ts" not in obj:
        raise CelogError("missing field 'ts'")
    ts = obj["ts"]
    if not _is_int(ts) or ts < 0:
        raise CelogError(f"'ts' must be a non-negative integer, got {ts!r}")
    dimm = obj.get("dimm")
    if not isinstance(dimm, str) or not dimm:
        raise CelogError(f"'dimm' must be a non-empty string, got {dimm!r}")
    etype = obj.get("type")
    if not isinstance(etype, str) or etype not in error_types:
        raise CelogError(f"'type' must be one of {sorted(error_types)}, got {etype!r}")
    addr: dict[str, int | None] = {}
    for name in _OPTIONAL_INT_FIELDS:
        value = obj.get(name)
        if value is not None and (not _is_int(value) or value < 0):
            raise CelogError(f"'{name}' must be a non-negative integer, got {value!r}")
        addr[name] = value
    if geometry is not None:
        for name, limit in (("bank", geometry.banks), ("row", geometry.rows), ("col", geometry.columns)):
            value = addr[name]
            if value is not None and value >= limit:
                raise CelogError(f"'{name}'={value} outside geometry (limit {limit})")
    return CeRecord(ts=ts, dimm=dimm, error_type=etype, **addr)


def parse_stream(
    lines: Iterable[str | bytes],
    error_types: frozenset[str] = DEFAULT_ERROR_TYPES,
    geometry: Geometry | None = None,
) -> ParseReport:
    """Parse line-delimited JSON records, collecting per-line errors.

    Blank lines are skipped. I/O errors from the underlying stream propagate.
    """
    report = ParseReport()
    for lineno, raw in enumerate(lines, start=1):
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                report.errors.append(LineError(lineno, f"invalid UTF-8: {exc}"))
                continue
        text = raw.strip()
        if not text:
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            report.errors.append(LineError(lineno, f"invalid JSON: {exc.msg}"))
            continue
        try:
            report.records.append(record_from_obj(obj, error_types, geometry))
        except CelogError as exc:
            report.errors.append(LineError(lineno, str(exc)))
    return report


def read_log(path, error_types: frozenset[str] = DEFAULT_ERROR_TYPES, geometry: Geometry | None = None) -> ParseReport:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_stream(fh, error_types, geometry)


def write_records(records: Iterable[CeRecord], fh: IO[str]) -> None:
    for rec in records:
        fh.write(rec.to_json())
        fh.write("\n")


def serialize(records: Iterable[CeRecord]) -> str:
    return "".join(rec.to_json() + "\n" for rec in records)


def filter_records(
    records: Iterable[CeRecord],
    drop_types: Iterable[str] = DEFAULT_DROP_TYPES,
    require_address: bool = True,
    address_fields: Sequence[str] = ADDRESS_FIELDS,
) -> list[CeRecord]:
    """Drop records of the given error types and, optionally, records lacking an address."""
    drop = frozenset(drop_types)
    out = []
    for rec in records:
        if rec.error_type in drop:
            continue
        if require_address and not rec.has_address(address_fields):
            continue
        out.append(rec)
    return out


def group_by_dimm(records: Iterable[CeRecord]) -> dict[str, list[CeRecord]]:
    """Group records per DIMM, keeping file order inside each group."""
    groups: dict[str, list[CeRecord]] = {}
    for rec in records:
        groups.setdefault(rec.dimm, []).append(rec)
    return groups


def read_failures(path) -> list[FailureRecord]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames)[:2] != ["dimm", "failure_time"]:
            raise CelogError(f"{path}: expected header 'dimm,failure_time', got {reader.fieldnames}")
        out = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            dimm = row["dimm"]
            try:
                t = int(row["failure_time"])
            except (TypeError, ValueError):
                raise CelogError(f"{path}:{lineno}: bad failure_time {row['failure_time']!r}") from None
            if not dimm or t < 0:
                raise CelogError(f"{path}:{lineno}: invalid failure record")
            if dimm in seen:
                raise CelogError(f"{path}:{lineno}: duplicate failure record for {dimm}")
            seen.add(dimm)
            out.append(FailureRecord(dimm, t))
    return out


def write_failures(failures: Iterable[FailureRecord], fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["dimm", "failure_time"])
    for f in failures:
        writer.writerow([f.dimm, f.failure_time])


def iter_sorted(records: Iterable[CeRecord]) -> Iterator[CeRecord]:
    """Stable sort by timestamp; ties keep their original order."""
    return iter(sorted(records, key=lambda r: r.ts))
