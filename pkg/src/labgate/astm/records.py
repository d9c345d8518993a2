"""ASTM E1394 style record layer.

A record is stored positionally: ``fields[0]`` is ASTM field 2 (the field right
after the record type letter). Each field value is decoded into one of

* ``str``                   - a plain value
* ``tuple[str, ...]``       - a component-coded value (``a^b^c``)
* :class:`Repeats`          - repeated values (``a\\b``), each a str or tuple

Named attributes (``Result.value``, ``Order.sample_id`` ...) are read through a
:data:`Layout`, a table mapping names to positions. Layouts are data so a
format profile can move fields around without code changes.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Any, Iterator, NamedTuple, Optional, Union

from ..model import Priority, RawResult, Source, WorklistOrder


class AstmParseError(ValueError):
    def __init__(self, kind: str, detail: str = "", index: Optional[int] = None):
        where = f" (record {index})" if index is not None else ""
        super().__init__(f"{kind}{where}: {detail}" if detail else f"{kind}{where}")
        self.kind = kind
        self.index = index


class OrphanResult(AstmParseError):
    def __init__(self, index: Optional[int] = None):
        super().__init__("orphan_result", "result record without an enclosing order", index)


@dataclass(frozen=True)
class Delimiters:
    field: str = "|"
    repeat: str = "\\"
    component: str = "^"
    escape: str = "&"

    def __post_init__(self):
        chars = (self.field, self.repeat, self.component, self.escape)
        if any(len(c) != 1 for c in chars) or len(set(chars)) != 4:
            raise ValueError(f"delimiters must be four distinct characters, got {chars!r}")
        if "\r" in chars:
            raise ValueError("CR cannot be a delimiter")

    @property
    def definition(self) -> str:
        """The header's field 2 text, e.g. ``\\^&``."""
        return self.repeat + self.component + self.escape


DEFAULT_DELIMITERS = Delimiters()


@dataclass(frozen=True)
class Repeats:
    items: tuple

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))


FieldValue = Union[str, tuple, Repeats]


# ---------------------------------------------------------------- escaping

def escape(text: str, d: Delimiters = DEFAULT_DELIMITERS) -> str:
    e = d.escape
    out = []
    for ch in text:
        if ch == e:
            out.append(f"{e}E{e}")
        elif ch == d.field:
            out.append(f"{e}F{e}")
        elif ch == d.component:
            out.append(f"{e}S{e}")
        elif ch == d.repeat:
            out.append(f"{e}R{e}")
        else:
            out.append(ch)
    return "".join(out)


def unescape(text: str, d: Delimiters = DEFAULT_DELIMITERS) -> str:
    e = d.escape
    if e not in text:
        return text
    table = {"F": d.field, "S": d.component, "R": d.repeat, "E": e}
    out = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == e and i + 2 < n and text[i + 2] == e and text[i + 1] in table:
            out.append(table[text[i + 1]])
            i += 3
        else:
            # unknown escapes pass through verbatim
            out.append(ch)
            i += 1
    return "".join(out)


def canonical(value: Any) -> FieldValue:
    """Collapse value shapes that would not survive a serialize/parse round trip."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, Repeats):
        items = tuple(_canonical_repeat(v) for v in value.items)
        if len(items) == 0:
            return ""
        if len(items) == 1:
            return items[0]
        return Repeats(items)
    if isinstance(value, (tuple, list)):
        return _canonical_repeat(value)
    return str(value)


def _canonical_repeat(value: Any) -> Union[str, tuple]:
    if isinstance(value, (tuple, list)):
        parts = tuple("" if c is None else str(c) for c in value)
        if len(parts) == 0:
            return ""
        if len(parts) == 1:
            return parts[0]
        return parts
    return "" if value is None else str(value)


def decode_field(text: str, d: Delimiters = DEFAULT_DELIMITERS) -> FieldValue:
    if d.repeat in text:
        return Repeats(tuple(_decode_repeat(r, d) for r in text.split(d.repeat)))
    return _decode_repeat(text, d)


def _decode_repeat(text: str, d: Delimiters) -> Union[str, tuple]:
    if d.component in text:
        return tuple(unescape(c, d) for c in text.split(d.component))
    return unescape(text, d)


def encode_field(value: FieldValue, d: Delimiters = DEFAULT_DELIMITERS) -> str:
    if isinstance(value, Repeats):
        return d.repeat.join(_encode_repeat(v, d) for v in value.items)
    return _encode_repeat(value, d)


def _encode_repeat(value: Union[str, tuple], d: Delimiters) -> str:
    if isinstance(value, tuple):
        return d.component.join(escape(c, d) for c in value)
    return escape(value, d)


def component(value: FieldValue, index: int) -> str:
    """1-based component of a field value; first repeat if repeated."""
    if isinstance(value, Repeats):
        value = value.items[0] if value.items else ""
    if isinstance(value, tuple):
        return value[index - 1] if index <= len(value) else ""
    return value if index == 1 else ""


# ---------------------------------------------------------------- layouts

class FieldRef(NamedTuple):
    position: int                     # ASTM field number, type letter is 1
    component: Optional[int] = None   # 1-based component inside the field
    kind: str = "text"                # text | raw | tests


Layout = dict[str, dict[str, FieldRef]]

DEFAULT_LAYOUT: Layout = {
    "H": {"control_id": FieldRef(3), "sender_name": FieldRef(5, kind="raw"),
          "processing_id": FieldRef(12), "version": FieldRef(13), "timestamp": FieldRef(14)},
    "P": {"sequence": FieldRef(2), "patient_id": FieldRef(3)},
    "O": {"sequence": FieldRef(2), "sample_id": FieldRef(3), "tests": FieldRef(5, 4, "tests"),
          "priority": FieldRef(6), "requested_at": FieldRef(7)},
    "R": {"sequence": FieldRef(2), "test_code": FieldRef(3, 4), "value": FieldRef(4),
          "unit": FieldRef(5), "ref_range_raw": FieldRef(6, kind="raw"), "abnormal_flag": FieldRef(7),
          "result_status": FieldRef(9), "operator": FieldRef(11), "completed_at": FieldRef(13)},
    "Q": {"sequence": FieldRef(2), "sample_id": FieldRef(3, 2), "end_range": FieldRef(4),
          "scope": FieldRef(5)},
    "C": {"sequence": FieldRef(2), "source": FieldRef(3), "text": FieldRef(4), "comment_type": FieldRef(5)},
    "L": {"sequence": FieldRef(2), "code": FieldRef(3)},
}


def override_layout(overrides: dict[str, dict[str, Any]], base: Layout = DEFAULT_LAYOUT) -> Layout:
    """Copy ``base`` with some positions replaced.

    ``overrides`` maps record type -> name -> FieldRef or a ``[position,
    component, kind]`` list as found in JSON format tables.
    """
    layout = {k: dict(v) for k, v in base.items()}
    for rtype, names in overrides.items():
        for name, ref in names.items():
            if not isinstance(ref, FieldRef):
                old = layout.get(rtype, {}).get(name)
                ref = list(ref) if isinstance(ref, (list, tuple)) else [ref]
                kind = old.kind if old else "text"
                ref = FieldRef(*ref) if len(ref) == 3 else FieldRef(ref[0], ref[1] if len(ref) > 1 else None, kind)
            layout.setdefault(rtype, {})[name] = ref
    return layout


# ---------------------------------------------------------------- records

@dataclass(frozen=True)
class Record:
    type: str
    fields: tuple = ()
    layout: Layout = field(default_factory=lambda: DEFAULT_LAYOUT, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(canonical(v) for v in self.fields))

    def raw_field(self, position: int) -> FieldValue:
        i = position - 2
        return self.fields[i] if 0 <= i < len(self.fields) else ""

    def get(self, name: str) -> Any:
        ref = self.layout[self.type][name]
        value = self.raw_field(ref.position)
        if ref.kind == "raw":
            return encode_field(value)
        if ref.kind == "tests":
            items = value.items if isinstance(value, Repeats) else ((value,) if value != "" else ())
            return tuple(component(v, ref.component or 1) for v in items)
        if ref.component is not None:
            return component(value, ref.component)
        if not isinstance(value, str):
            return encode_field(value)
        return value

    @property
    def sequence(self) -> int:
        text = self.get("sequence") if "sequence" in self.layout.get(self.type, {}) else ""
        try:
            return int(text)
        except (TypeError, ValueError):
            return 0

    def with_layout(self, layout: Layout) -> "Record":
        return replace(self, layout=layout)

    @classmethod
    def build(cls, layout: Optional[Layout] = None, extra: Optional[dict[int, Any]] = None,
              **values: Any) -> "Record":
        """Construct a record from named attributes (and ``extra`` positions)."""
        layout = layout or DEFAULT_LAYOUT
        rtype = cls.TYPE
        slots: dict[int, Any] = dict(extra or {})
        for name, v in values.items():
            if v is None:
                continue
            ref = layout[rtype][name]
            if name == "sequence":
                v = str(v)
            if ref.kind == "raw":
                slots[ref.position] = decode_field(v)
            elif ref.kind == "tests":
                width = ref.component or 1
                reps = []
                for code in v:
                    parts = [""] * width
                    parts[width - 1] = code
                    reps.append(tuple(parts))
                slots[ref.position] = Repeats(tuple(reps))
            elif ref.component is not None:
                cur = slots.get(ref.position, "")
                parts = list(cur) if isinstance(cur, tuple) else ([cur] if cur else [])
                parts += [""] * (ref.component - len(parts))
                parts[ref.component - 1] = v
                slots[ref.position] = tuple(parts)
            else:
                slots[ref.position] = v
        top = max(slots, default=1)
        fields = [slots.get(p, "") for p in range(2, top + 1)]
        return _CLASSES[rtype](rtype, tuple(fields), layout)


def _attr(name: str):
    return property(lambda self: self.get(name))


class Header(Record):
    TYPE = "H"
    sender_name = _attr("sender_name")
    processing_id = _attr("processing_id")
    control_id = _attr("control_id")
    timestamp = _attr("timestamp")

    @property
    def delimiters(self) -> Delimiters:
        return self._delims

    # The header's own field 2 is the delimiter definition and is stored raw.
    _delims: Delimiters = DEFAULT_DELIMITERS

    @classmethod
    def build(cls, layout: Optional[Layout] = None, extra: Optional[dict[int, Any]] = None,
              delimiters: Delimiters = DEFAULT_DELIMITERS, **values: Any) -> "Header":
        extra = dict(extra or {})
        extra[2] = delimiters.definition
        rec = super().build(layout, extra, **values)
        object.__setattr__(rec, "_delims", delimiters)
        return rec


class Patient(Record):
    TYPE = "P"
    patient_id = _attr("patient_id")


class Order(Record):
    TYPE = "O"
    sample_id = _attr("sample_id")
    tests = _attr("tests")
    priority = _attr("priority")


class Result(Record):
    TYPE = "R"
    test_code = _attr("test_code")
    value = _attr("value")
    unit = _attr("unit")
    ref_range_raw = _attr("ref_range_raw")
    abnormal_flag = _attr("abnormal_flag")
    result_status = _attr("result_status")
    operator = _attr("operator")
    completed_at = _attr("completed_at")


class Query(Record):
    TYPE = "Q"
    sample_id = _attr("sample_id")
    scope = _attr("scope")


class Comment(Record):
    TYPE = "C"
    text = _attr("text")


class TerminatorRecord(Record):
    TYPE = "L"
    code = _attr("code")


_CLASSES: dict[str, type] = {c.TYPE: c for c in (Header, Patient, Order, Result, Query, Comment, TerminatorRecord)}
RECORD_TYPES = tuple(_CLASSES)


def parse_record(line: str, d: Delimiters = DEFAULT_DELIMITERS, layout: Optional[Layout] = None,
                 index: Optional[int] = None) -> Record:
    """Parse one record (without its CR)."""
    layout = layout or DEFAULT_LAYOUT
    if line[:1] == "H":
        if len(line) < 5:
            raise AstmParseError("malformed", "header too short", index)
        hd = Delimiters(line[1], line[2], line[3], line[4])
        parts = line.split(hd.field)
        fields = [parts[1]] + [decode_field(p, hd) for p in parts[2:]]
        rec = Header("H", tuple(fields), layout)
        # Keep the definition string verbatim, not as a decoded value.
        object.__setattr__(rec, "fields", (parts[1],) + rec.fields[1:])
        object.__setattr__(rec, "_delims", hd)
        return rec
    parts = line.split(d.field)
    if len(parts) < 2:
        raise AstmParseError("malformed", f"fewer than 2 fields in {line[:20]!r}", index)
    rtype = parts[0]
    cls = _CLASSES.get(rtype)
    if cls is None or rtype == "H":
        raise AstmParseError("unknown_record_type", repr(rtype[:8]), index)
    return cls(rtype, tuple(decode_field(p, d) for p in parts[1:]), layout)


def serialize_record(rec: Record, d: Delimiters = DEFAULT_DELIMITERS) -> str:
    if isinstance(rec, Header):
        hd = rec.delimiters
        head = hd.field + rec.fields[0] if rec.fields else hd.field + hd.definition
        rest = "".join(hd.field + encode_field(v, hd) for v in rec.fields[1:])
        return "H" + head + rest
    return rec.type + "".join(d.field + encode_field(v, d) for v in rec.fields)


# ---------------------------------------------------------------- messages

@dataclass(frozen=True)
class AstmMessage:
    records: tuple[Record, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def header(self) -> Header:
        return self.records[0]  # type: ignore[return-value]

    @property
    def delimiters(self) -> Delimiters:
        return self.header.delimiters if self.records and isinstance(self.records[0], Header) \
            else DEFAULT_DELIMITERS

    @property
    def is_query(self) -> bool:
        return any(isinstance(r, Query) for r in self.records)


# record type -> record types allowed next (comments are transparent)
_NEXT = {
    "H": set("PQL"),
    "P": set("POL"),
    "O": set("OPRL"),
    "R": set("OPRL"),
    "Q": set("QL"),
}


def check_hierarchy(records: tuple[Record, ...]) -> None:
    """Enforce H (P (O (R|C)*)*)* L, or H Q+ L for queries.

    Comments are accepted after any record but the terminator.
    """
    if not records or records[0].type != "H":
        raise AstmParseError("missing_header", "", 0)
    if records[-1].type != "L":
        raise AstmParseError("missing_terminator", "", len(records) - 1)
    last = "H"
    for i, rec in enumerate(records[1:], start=1):
        t = rec.type
        if t == "C":
            continue
        if last == "L" or t not in _NEXT[last]:
            raise AstmParseError("hierarchy_violation", f"{t} after {last}", i)
        last = t
    _check_sequences(records)


def _check_sequences(records: tuple[Record, ...]) -> None:
    counters: dict[str, int] = {}
    for i, rec in enumerate(records):
        t = rec.type
        if t in ("H", "L", "C"):
            continue
        # a new parent restarts the numbering of its children
        if t == "P":
            counters.pop("O", None)
            counters.pop("R", None)
        elif t == "O":
            counters.pop("R", None)
        want = counters.get(t, 0) + 1
        if rec.sequence != want:
            raise AstmParseError("hierarchy_violation",
                                 f"{t} sequence {rec.get('sequence')!r}, expected {want}", i)
        counters[t] = want


def _lines(text: Union[bytes, str]) -> list[str]:
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("latin-1")
    lines = text.split("\r")
    if lines and lines[-1] in ("", "\n"):
        lines.pop()
    return [ln[1:] if ln.startswith("\n") else ln for ln in lines]


def parse_message(text: Union[bytes, str], layout: Optional[Layout] = None) -> AstmMessage:
    lines = _lines(text)
    if not lines or not lines[0].startswith("H"):
        raise AstmParseError("missing_header", "", 0)
    header = parse_record(lines[0], layout=layout, index=0)
    d = header.delimiters
    records = [header]
    for i, line in enumerate(lines[1:], start=1):
        records.append(parse_record(line, d, layout, index=i))
    check_hierarchy(tuple(records))
    return AstmMessage(tuple(records))


def serialize_message(msg: AstmMessage) -> bytes:
    check_hierarchy(msg.records)
    d = msg.delimiters
    return "".join(serialize_record(r, d) + "\r" for r in msg.records).encode("latin-1")


def is_complete_message(text: bytes) -> bool:
    """True when ``text`` ends with a terminator record (cheap check, no parsing)."""
    if not text.endswith(b"\r"):
        return False
    start = text.rfind(b"\r", 0, len(text) - 1) + 1
    return text[start:start + 1] == b"L" and text.startswith(b"H")


# ---------------------------------------------------------------- extraction

_DATE_FORMATS = ("%Y%m%d%H%M%S", "%Y%m%d%H%M", "%Y%m%d")


def parse_astm_datetime(text: str) -> Optional[datetime]:
    text = (text or "").strip()
    for fmt in _DATE_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    return None


def iter_results(msg: AstmMessage, device_id: str) -> Iterator[Union[RawResult, AstmParseError]]:
    """Yield one item per Result record: a RawResult, or the error that stopped it."""
    sample_id = None
    pending: Optional[tuple[Result, list[str]]] = None

    def finish():
        rec, notes = pending
        if sample_id is None:
            return OrphanResult()
        try:
            return RawResult(
                device_id=device_id,
                sample_id=sample_id,
                machine_test_code=rec.test_code,
                value=rec.value,
                unit=rec.unit or None,
                ref_range_raw=rec.ref_range_raw or None,
                abnormal_flag=rec.abnormal_flag or None,
                result_status=rec.result_status or None,
                observed_at=parse_astm_datetime(rec.completed_at),
                source=Source.STREAM,
                operator_id=rec.operator or None,
                notes=tuple(notes),
            )
        except ValueError as exc:
            return AstmParseError("malformed", str(exc))

    for rec in msg.records:
        if isinstance(rec, Comment):
            if pending is not None:
                pending[1].append(rec.text)
            continue
        if pending is not None:
            yield finish()
            pending = None
        if isinstance(rec, Patient):
            sample_id = None
        elif isinstance(rec, Order):
            sample_id = rec.sample_id or None
        elif isinstance(rec, Result):
            pending = (rec, [])
    if pending is not None:
        yield finish()


def extract_results(msg: AstmMessage, device_id: str) -> list[RawResult]:
    out = []
    for item in iter_results(msg, device_id):
        if isinstance(item, AstmParseError):
            raise item
        out.append(item)
    return out


def count_results(msg: AstmMessage) -> int:
    return sum(1 for r in msg.records if r.type == "R")


# ---------------------------------------------------------------- worklist download

def build_order_message(order: WorklistOrder, d: Delimiters = DEFAULT_DELIMITERS,
                        layout: Optional[Layout] = None, sender_name: str = "") -> AstmMessage:
    layout = layout or DEFAULT_LAYOUT
    return AstmMessage((
        Header.build(layout, delimiters=d, sender_name=sender_name or None, processing_id="P"),
        Patient.build(layout, sequence=1, patient_id=order.patient_ref),
        Order.build(layout, sequence=1, sample_id=order.sample_id, tests=list(order.tests),
                    priority="S" if order.priority is Priority.STAT else "R"),
        TerminatorRecord.build(layout, sequence=1, code="N"),
    ))


def build_no_order_message(d: Delimiters = DEFAULT_DELIMITERS, sender_name: str = "") -> AstmMessage:
    """Reply for a query with nothing on the worklist: header plus an 'I' terminator."""
    return AstmMessage((
        Header.build(delimiters=d, sender_name=sender_name or None, processing_id="P"),
        TerminatorRecord.build(sequence=1, code="I"),
    ))


def build_query_message(sample_id: str, d: Delimiters = DEFAULT_DELIMITERS, sender_name: str = "") -> AstmMessage:
    return AstmMessage((
        Header.build(delimiters=d, sender_name=sender_name or None, processing_id="P"),
        Query.build(sequence=1, sample_id=sample_id, scope="ALL"),
        TerminatorRecord.build(sequence=1, code="N"),
    ))


def orders_in(msg: AstmMessage) -> list[WorklistOrder]:
    """Worklist orders carried by a downloaded order message."""
    out = []
    for rec in msg.records:
        if isinstance(rec, Order) and rec.tests:
            prio = Priority.STAT if rec.priority == "S" else Priority.ROUTINE
            out.append(WorklistOrder(rec.sample_id, tuple(rec.tests), prio))
    return out
