"""Minimal HL7 v2 codec: ORU^R01 results in, ACK out, MLLP framing."""
from __future__ import annotations

import uuid
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional, Union

from .model import RawResult, Source

VT, FS, CR = 0x0B, 0x1C, 0x0D
MLLP_START = bytes((VT,))
MLLP_END = bytes((FS, CR))


class Hl7Error(ValueError):
    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind


# ---------------------------------------------------------------- MLLP

def mllp_encode(text: bytes) -> bytes:
    if FS in text:
        raise Hl7Error("illegal_byte", "message contains 0x1C")
    return MLLP_START + text + MLLP_END


@dataclass
class MllpResult:
    messages: list[bytes]
    remainder: bytes
    noise: list[bytes] = field(default_factory=list)


def mllp_decode(data: bytes) -> MllpResult:
    """Split a byte stream into MLLP payloads.

    The remainder holds an unfinished trailing envelope; bytes outside any
    envelope are returned as noise.
    """
    messages, noise = [], []
    pos = 0
    n = len(data)
    while pos < n:
        start = data.find(MLLP_START, pos)
        if start < 0:
            noise.append(data[pos:])
            return MllpResult(messages, b"", noise)
        if start > pos:
            noise.append(data[pos:start])
        end = data.find(MLLP_END, start + 1)
        if end < 0:
            return MllpResult(messages, data[start:], noise)
        # a new start byte inside the envelope means the earlier one was junk
        restart = data.rfind(MLLP_START, start + 1, end)
        if restart > 0:
            noise.append(data[start:restart])
            start = restart
        messages.append(data[start + 1:end])
        pos = end + 2
    return MllpResult(messages, b"", noise)


class MllpStream:
    """Per-session streaming wrapper around :func:`mllp_decode`."""

    def __init__(self):
        self._buf = b""
        self.noise_bytes = 0

    def feed(self, data: bytes) -> list[bytes]:
        res = mllp_decode(self._buf + data)
        self._buf = res.remainder
        self.noise_bytes += sum(len(x) for x in res.noise)
        return res.messages


# ---------------------------------------------------------------- messages

@dataclass(frozen=True)
class Encoding:
    field: str = "|"
    component: str = "^"
    repeat: str = "~"
    escape: str = "\\"
    subcomponent: str = "&"

    @property
    def chars(self) -> str:
        return self.component + self.repeat + self.escape + self.subcomponent


DEFAULT_ENCODING = Encoding()


@dataclass(frozen=True)
class Repeated:
    items: tuple


Hl7Value = Union[str, tuple, Repeated]


@dataclass(frozen=True)
class Segment:
    """One segment. ``fields[0]`` is field 1 (for MSH, the field separator)."""

    id: str
    fields: tuple = ()

    def __getitem__(self, n: int) -> Hl7Value:
        return self.fields[n - 1] if 1 <= n <= len(self.fields) else ""

    def component(self, n: int, c: int = 1) -> str:
        value = self[n]
        if isinstance(value, Repeated):
            value = value.items[0] if value.items else ""
        if isinstance(value, tuple):
            value = value[c - 1] if c <= len(value) else ""
        elif c != 1:
            return ""
        if isinstance(value, tuple):
            value = value[0] if value else ""
        return value

    def text(self, n: int, enc: Encoding = DEFAULT_ENCODING) -> str:
        """Field ``n`` re-encoded as wire text."""
        return encode_value(self[n], enc)


@dataclass(frozen=True)
class Hl7Message:
    segments: tuple[Segment, ...]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    @property
    def msh(self) -> Segment:
        return self.segments[0]

    @property
    def encoding(self) -> Encoding:
        msh = self.msh
        sep, chars = msh[1], msh[2]
        return Encoding(sep, chars[0], chars[1], chars[2], chars[3])

    @property
    def message_type(self) -> str:
        return self.msh.text(9, self.encoding)

    @property
    def control_id(self) -> str:
        return self.msh.component(10)

    def find(self, seg_id: str) -> list[Segment]:
        return [s for s in self.segments if s.id == seg_id]


def _unescape(text: str, enc: Encoding) -> str:
    e = enc.escape
    if e not in text:
        return text
    table = {"F": enc.field, "S": enc.component, "T": enc.subcomponent, "R": enc.repeat, "E": e}
    out = []
    i, n = 0, len(text)
    while i < n:
        if text[i] == e and i + 2 < n and text[i + 2] == e and text[i + 1] in table:
            out.append(table[text[i + 1]])
            i += 3
        else:
            out.append(text[i])
            i += 1
    return "".join(out)


def _escape(text: str, enc: Encoding) -> str:
    e = enc.escape
    table = {e: "E", enc.field: "F", enc.component: "S", enc.subcomponent: "T", enc.repeat: "R"}
    if not any(c in text for c in table):
        return text
    return "".join(f"{e}{table[c]}{e}" if c in table else c for c in text)


def decode_value(text: str, enc: Encoding = DEFAULT_ENCODING) -> Hl7Value:
    if enc.repeat in text:
        return Repeated(tuple(_decode_rep(r, enc) for r in text.split(enc.repeat)))
    return _decode_rep(text, enc)


def _decode_rep(text: str, enc: Encoding):
    if enc.component in text:
        return tuple(_decode_comp(c, enc) for c in text.split(enc.component))
    value = _decode_comp(text, enc)
    # subcomponents without components: one component holding them
    return (value,) if isinstance(value, tuple) else value


def _decode_comp(text: str, enc: Encoding):
    if enc.subcomponent in text:
        return tuple(_unescape(s, enc) for s in text.split(enc.subcomponent))
    return _unescape(text, enc)


def encode_value(value: Hl7Value, enc: Encoding = DEFAULT_ENCODING) -> str:
    if isinstance(value, Repeated):
        return enc.repeat.join(_encode_rep(v, enc) for v in value.items)
    return _encode_rep(value, enc)


def _encode_rep(value, enc: Encoding) -> str:
    if isinstance(value, tuple):
        return enc.component.join(_encode_comp(c, enc) for c in value)
    return _encode_comp(value, enc)


def _encode_comp(value, enc: Encoding) -> str:
    if isinstance(value, tuple):
        return enc.subcomponent.join(_escape(s, enc) for s in value)
    return _escape(value, enc)


def parse_hl7(text: Union[bytes, str]) -> Hl7Message:
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("latin-1")
    if not text.startswith("MSH") or len(text) < 8:
        raise Hl7Error("missing_msh")
    sep = text[3]
    chars = text[4:].split(sep, 1)[0]
    if len(chars) not in (4, 5) or len(set(chars + sep)) != len(chars) + 1 or "\r" in chars:
        raise Hl7Error("bad_encoding_chars", repr(chars))
    enc = Encoding(sep, chars[0], chars[1], chars[2], chars[3])
    segments = []
    for raw in text.replace("\n", "\r").split("\r"):
        if not raw:
            continue
        parts = raw.split(sep)
        seg_id = parts[0]
        if seg_id == "MSH":
            fields = (sep, parts[1]) + tuple(decode_value(p, enc) for p in parts[2:])
        else:
            fields = tuple(decode_value(p, enc) for p in parts[1:])
        segments.append(Segment(seg_id, fields))
    if not segments or segments[0].id != "MSH":
        raise Hl7Error("missing_msh")
    return Hl7Message(tuple(segments))


def serialize_hl7(msg: Hl7Message) -> bytes:
    enc = msg.encoding
    lines = []
    for seg in msg.segments:
        if seg.id == "MSH":
            body = [seg.fields[1]] + [encode_value(v, enc) for v in seg.fields[2:]]
        else:
            body = [encode_value(v, enc) for v in seg.fields]
        lines.append(enc.field.join([seg.id] + body))
    return ("\r".join(lines) + "\r").encode("latin-1")


def build_msh(sending_app: str, sending_facility: str, receiving_app: str, receiving_facility: str,
              message_type: str, control_id: str, timestamp: Optional[str] = None,
              processing_id: str = "P", version: str = "2.3") -> Segment:
    ts = timestamp or datetime.now().strftime("%Y%m%d%H%M%S")
    mtype = tuple(message_type.split("^")) if "^" in message_type else message_type
    return Segment("MSH", ("|", "^~\\&", sending_app, sending_facility, receiving_app, receiving_facility,
                           ts, "", mtype, control_id, processing_id, version))


# ---------------------------------------------------------------- results / ack

_HL7_DATES = ("%Y%m%d%H%M%S", "%Y%m%d%H%M", "%Y%m%d")


def _hl7_datetime(text: str) -> Optional[datetime]:
    text = (text or "").split("+")[0].split("-")[0].split(".")[0]
    for fmt in _HL7_DATES:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    return None


def iter_results_hl7(msg: Hl7Message, device_id: str):
    """Yield a RawResult (or the Hl7Error that stopped it) per OBX segment."""
    if msg.message_type != "ORU^R01":
        raise Hl7Error("wrong_message_type", msg.message_type)
    enc = msg.encoding
    sample_id = None
    for seg in msg.segments[1:]:
        if seg.id == "OBR":
            sample_id = seg.component(3) or seg.component(2) or None
        elif seg.id == "OBX":
            if sample_id is None:
                yield Hl7Error("obx_without_obr", "OBX before any OBR")
                continue
            try:
                yield RawResult(
                    device_id=device_id,
                    sample_id=sample_id,
                    machine_test_code=seg.component(3, 1),
                    value=seg.text(5, enc),
                    unit=seg.component(6) or None,
                    ref_range_raw=seg.text(7, enc) or None,
                    abnormal_flag=seg.text(8, enc) or None,
                    result_status=seg.component(11) or None,
                    observed_at=_hl7_datetime(seg.component(14)),
                    source=Source.STREAM,
                    operator_id=seg.component(16) or None,
                )
            except ValueError as exc:
                yield Hl7Error("malformed", str(exc))


def extract_results_hl7(msg: Hl7Message, device_id: str) -> list[RawResult]:
    out = []
    for item in iter_results_hl7(msg, device_id):
        if isinstance(item, Hl7Error):
            raise item
        out.append(item)
    return out


def count_obx(msg: Hl7Message) -> int:
    return len(msg.find("OBX"))


def build_ack(original: Hl7Message, code: str, control_id: Optional[str] = None,
              text: str = "") -> Hl7Message:
    if code not in ("AA", "AE", "AR"):
        raise ValueError(f"ack code must be AA, AE or AR, not {code!r}")
    o = original.msh
    msh = build_msh(
        sending_app=o[5], sending_facility=o[6], receiving_app=o[3], receiving_facility=o[4],
        message_type="ACK", control_id=control_id or uuid.uuid4().hex[:20],
        processing_id=o.component(11) or "P", version=o.component(12) or "2.3",
    )
    msa = (code, original.control_id)
    if text:
        msa = msa + (text,)
    return Hl7Message((msh, Segment("MSA", msa)))


def build_reject(control_id: str = "", text: str = "") -> Hl7Message:
    """ACK with code AR for input too broken to echo its header."""
    msh = build_msh("", "", "", "", "ACK", uuid.uuid4().hex[:20])
    return Hl7Message((msh, Segment("MSA", ("AR", control_id) + ((text,) if text else ()))))
