"""Descriptor-driven codec for proprietary frames and result log files.

A new instrument format is a descriptor (data), not code. Descriptors bind
positional fields to roles such as ``sample_id`` or ``value``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional, Sequence

from . import kernels
from .model import RawResult, Source

STX, ETX, ACK, NAK = 0x02, 0x03, 0x06, 0x15

ROLES = ("sample_id", "test_code", "value", "unit", "ref_range", "flag", "status", "timestamp", "ignore")
REQUIRED_ROLES = ("sample_id", "test_code", "value")
TIMESTAMP_FORMATS = ("%Y%m%d%H%M%S", "%Y%m%d%H%M", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y%m%d")


class FramingError(ValueError):
    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind


def _check_order(field_order: Sequence[str]) -> None:
    bad = [r for r in field_order if r not in ROLES]
    if bad:
        raise ValueError(f"unknown field roles {bad}")
    missing = [r for r in REQUIRED_ROLES if r not in field_order]
    if missing:
        raise ValueError(f"field_order lacks required roles {missing}")


@dataclass(frozen=True)
class FrameDescriptor:
    format_id: str
    field_order: tuple[str, ...]
    field_separator: Optional[int] = ord(";")
    field_widths: Optional[tuple[int, ...]] = None   # fixed-width layout instead of a separator
    start_byte: int = STX
    end_byte: int = ETX
    has_bcc: bool = False
    bcc_kind: str = "xor"
    ack_byte: Optional[int] = None
    nak_byte: Optional[int] = None
    encoding: str = "latin-1"

    def __post_init__(self):
        object.__setattr__(self, "field_order", tuple(self.field_order))
        if self.field_widths is not None:
            object.__setattr__(self, "field_widths", tuple(self.field_widths))
            if len(self.field_widths) != len(self.field_order):
                raise ValueError("field_widths and field_order lengths differ")
        elif self.field_separator is None:
            raise ValueError("need field_separator or field_widths")
        _check_order(self.field_order)
        if self.start_byte == self.end_byte:
            raise ValueError("start_byte and end_byte must differ")
        if self.bcc_kind not in ("xor", "sum_mod_256"):
            raise ValueError(f"bcc_kind {self.bcc_kind!r}")


@dataclass(frozen=True)
class FileDescriptor:
    format_id: str
    field_order: tuple[str, ...]
    extension: str = ".txt"
    line_separator: int = ord("\n")
    column_separator: Optional[int] = ord("\t")
    field_widths: Optional[tuple[int, ...]] = None
    header_lines_to_skip: int = 0
    encoding: str = "latin-1"

    def __post_init__(self):
        object.__setattr__(self, "field_order", tuple(self.field_order))
        if self.field_widths is not None:
            object.__setattr__(self, "field_widths", tuple(self.field_widths))
        elif self.column_separator is None:
            raise ValueError("need column_separator or field_widths")
        _check_order(self.field_order)
        if self.header_lines_to_skip < 0:
            raise ValueError("header_lines_to_skip must be >= 0")


def bcc(payload: bytes, kind: str = "xor") -> int:
    if kind == "xor":
        return kernels.xor_all(payload)
    if kind == "sum_mod_256":
        return kernels.sum_mod256(payload)
    raise ValueError(f"unknown bcc kind {kind!r}")


def _split(text: str, separator: Optional[int], widths: Optional[Sequence[int]]) -> list[str]:
    if widths is not None:
        out, pos = [], 0
        for w in widths:
            out.append(text[pos:pos + w].strip())
            pos += w
        return out
    return text.split(chr(separator))


def _parse_ts(text: str) -> Optional[datetime]:
    for fmt in TIMESTAMP_FORMATS:
        try:
            return datetime.strptime(text.strip(), fmt)
        except ValueError:
            continue
    return None


def bind_fields(values: Sequence[str], field_order: Sequence[str], device_id: str,
                source: Source = Source.STREAM, operator_id: Optional[str] = None) -> RawResult:
    """Bind positional values to roles; raises FramingError on missing required fields."""
    if len(values) < len(field_order):
        needed = [r for r in field_order[len(values):] if r in REQUIRED_ROLES]
        if needed:
            raise FramingError("missing_required_field", ", ".join(needed))
    bound: dict[str, str] = {}
    for role, value in zip(field_order, values):
        if role != "ignore" and role not in bound:
            bound[role] = value.strip()
    for role in REQUIRED_ROLES:
        if not bound.get(role):
            raise FramingError("missing_required_field", role)
    return RawResult(
        device_id=device_id,
        sample_id=bound["sample_id"],
        machine_test_code=bound["test_code"],
        value=bound["value"],
        unit=bound.get("unit") or None,
        ref_range_raw=bound.get("ref_range") or None,
        abnormal_flag=bound.get("flag") or None,
        result_status=bound.get("status") or None,
        observed_at=_parse_ts(bound["timestamp"]) if bound.get("timestamp") else None,
        source=source,
        operator_id=operator_id,
    )


def split_frames(data: bytes, desc: FrameDescriptor) -> tuple[list[bytes], bytes]:
    """Cut a stream into complete frames (start..end [+bcc]); returns (frames, remainder).

    Bytes before a start byte are dropped.
    """
    frames = []
    pos, n = 0, len(data)
    tail = 1 if desc.has_bcc else 0
    while True:
        start = data.find(bytes((desc.start_byte,)), pos)
        if start < 0:
            return frames, b""
        end = data.find(bytes((desc.end_byte,)), start + 1)
        if end < 0 or end + tail >= n:
            return frames, data[start:]
        frames.append(data[start:end + 1 + tail])
        pos = end + 1 + tail
        if pos >= n:
            return frames, b""


def decode_generic(data: bytes, desc: FrameDescriptor, device_id: str = "") -> list[RawResult]:
    """Decode every frame in ``data``; one result per frame."""
    frames, rest = split_frames(data, desc)
    if not frames:
        raise FramingError("bad_envelope", "no complete frame")
    if rest:
        raise FramingError("bad_envelope", "trailing partial frame")
    return [decode_one(f, desc, device_id) for f in frames]


def decode_one(frame: bytes, desc: FrameDescriptor, device_id: str = "", verify_bcc: bool = True) -> RawResult:
    if len(frame) < 2 or frame[0] != desc.start_byte:
        raise FramingError("bad_envelope", "missing start byte")
    if desc.has_bcc:
        if len(frame) < 3 or frame[-2] != desc.end_byte:
            raise FramingError("bad_envelope", "missing end byte")
        payload, check = frame[1:-2], frame[-1]
        if verify_bcc and bcc(payload, desc.bcc_kind) != check:
            raise FramingError("bcc_mismatch", f"got 0x{check:02X} want 0x{bcc(payload, desc.bcc_kind):02X}")
    else:
        if frame[-1] != desc.end_byte:
            raise FramingError("bad_envelope", "missing end byte")
        payload = frame[1:-1]
    text = payload.decode(desc.encoding)
    values = _split(text, desc.field_separator, desc.field_widths)
    return bind_fields(values, desc.field_order, device_id)


def encode_generic(values: dict[str, str], desc: FrameDescriptor) -> bytes:
    """Build a frame from role -> value (used by simulators and tests)."""
    cols = []
    for i, role in enumerate(desc.field_order):
        v = values.get(role, "") if role != "ignore" else ""
        if desc.field_widths is not None:
            w = desc.field_widths[i]
            if len(v) > w:
                raise ValueError(f"{role} value {v!r} wider than {w}")
            cols.append(v.ljust(w))
        else:
            cols.append(v)
    sep = "" if desc.field_widths is not None else chr(desc.field_separator)
    payload = sep.join(cols).encode(desc.encoding)
    frame = bytes((desc.start_byte,)) + payload + bytes((desc.end_byte,))
    if desc.has_bcc:
        frame += bytes((bcc(payload, desc.bcc_kind),))
    return frame


class GenericStream:
    """Per-session reassembly of descriptor frames from arbitrary chunks."""

    def __init__(self, desc: FrameDescriptor):
        self.desc = desc
        self._buf = b""

    def feed(self, data: bytes) -> list[bytes]:
        frames, self._buf = split_frames(self._buf + data, self.desc)
        return frames


# ---------------------------------------------------------------- files

@dataclass
class RejectedLine:
    line: int
    reason: str
    text: str = ""


@dataclass
class IngestReport:
    results: list[RawResult] = field(default_factory=list)
    rejected: list[RejectedLine] = field(default_factory=list)
    total_lines: int = 0
    digest: str = ""

    @property
    def accepted(self) -> int:
        return len(self.results)


def ingest_file(content: bytes, desc: FileDescriptor, device_id: str, operator_id: Optional[str]) -> IngestReport:
    """Parse a whole result file. Line numbers in the report are 1-based file lines."""
    if not content.strip():
        raise FramingError("empty_file")
    text = content.decode(desc.encoding)
    sep = chr(desc.line_separator)
    lines = text.split(sep)
    if lines and lines[-1].strip() == "":
        lines.pop()
    report = IngestReport(digest=hashlib.sha256(content).hexdigest())
    for lineno, line in enumerate(lines, start=1):
        if lineno <= desc.header_lines_to_skip:
            continue
        line = line.rstrip("\r")
        report.total_lines += 1
        if not line.strip():
            report.rejected.append(RejectedLine(lineno, "blank_line"))
            continue
        try:
            values = _split(line, desc.column_separator, desc.field_widths)
            report.results.append(bind_fields(values, desc.field_order, device_id, Source.FILE, operator_id))
        except FramingError as exc:
            report.rejected.append(RejectedLine(lineno, exc.kind, line))
        except ValueError as exc:
            report.rejected.append(RejectedLine(lineno, "malformed", str(exc)))
    return report


def render_file(rows: Sequence[dict[str, str]], desc: FileDescriptor, header: Sequence[str] = ()) -> bytes:
    """Write a result file in ``desc``'s layout (simulators and tests)."""
    out = list(header)
    for row in rows:
        cols = []
        for i, role in enumerate(desc.field_order):
            v = row.get(role, "") if role != "ignore" else ""
            cols.append(v.ljust(desc.field_widths[i]) if desc.field_widths else v)
        out.append(("" if desc.field_widths else chr(desc.column_separator)).join(cols))
    sep = chr(desc.line_separator)
    return (sep.join(out) + sep).encode(desc.encoding)
