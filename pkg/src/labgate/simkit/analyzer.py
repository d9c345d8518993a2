"""Scripted instrument simulators.

The byte-level code here is written separately from the gateway's codecs on
purpose: a simulator that shared the gateway's framing would agree with it
even when both were wrong.
"""
from __future__ import annotations

import json
import logging
import random
import socket
import time
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Optional

from .script import SimScript, byte_value

log = logging.getLogger(__name__)

ENQ, ACK, NAK, EOT, STX, ETX, ETB = 0x05, 0x06, 0x15, 0x04, 0x02, 0x03, 0x17
VT, FS, CR = 0x0B, 0x1C, 0x0D
NAMES = {ENQ: "ENQ", ACK: "ACK", NAK: "NAK", EOT: "EOT", STX: "STX", ETX: "ETX", ETB: "ETB"}
MAX_CORRUPTIONS = 6
MAX_FRAME_TEXT = 240


class ExpectationFailed(AssertionError):
    def __init__(self, step: int, expected: bytes, observed: bytes, detail: str = ""):
        self.step, self.expected, self.observed = step, expected, observed
        super().__init__(f"step {step}: expected {_show(expected)} got {_show(observed)} {detail}".rstrip())


class ConnectFailed(ConnectionError):
    pass


class LinkLost(ConnectionError):
    pass


def _show(data: bytes) -> str:
    return "".join(f"<{NAMES[b]}>" if b in NAMES else (chr(b) if 32 <= b < 127 else f"<{b:02X}>") for b in data)


@dataclass
class SimFaults:
    """Instrument-side faults, drawn per frame / per message from the simulator's RNG."""

    frame_corruption: float = 0.0     # probability a sent frame is damaged in flight
    connection_drop: float = 0.0      # probability a message transfer loses its connection
    delay_ms: int = 0


# ---------------------------------------------------------------- transcript

class Transcript:
    def __init__(self, name: str = ""):
        self.name = name
        self.t0 = time.monotonic()
        self.records: list[dict] = []

    def log(self, direction: str, data: bytes = b"", note: str = "") -> None:
        rec = {"t": round(time.monotonic() - self.t0, 6), "dir": direction}
        if data:
            rec["hex"] = data.hex()
            rec["ascii"] = _show(data)
        if note:
            rec["note"] = note
        self.records.append(rec)

    def lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in self.records]

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.lines()) + "\n")

    def stream(self, direction: str) -> bytes:
        return b"".join(bytes.fromhex(r["hex"]) for r in self.records if r["dir"] == direction and "hex" in r)

    def notes(self, prefix: str = "") -> list[str]:
        return [r["note"] for r in self.records if r.get("note", "").startswith(prefix)]


# ---------------------------------------------------------------- socket link

class Link:
    """Blocking TCP client with a receive buffer, logging every byte."""

    def __init__(self, host: str, port: int, transcript: Transcript, connect_deadline: float = 10.0):
        self.host, self.port = host, port
        self.transcript = transcript
        self.connect_deadline = connect_deadline
        self.sock: Optional[socket.socket] = None
        self.buf = bytearray()
        self.reconnects = 0

    def connect(self) -> None:
        deadline = time.monotonic() + self.connect_deadline
        while True:
            try:
                self.sock = socket.create_connection((self.host, self.port), timeout=2.0)
                self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self.buf.clear()
                self.transcript.log("ev", note="connected")
                return
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise ConnectFailed(f"{self.host}:{self.port}: {exc}") from None
                time.sleep(0.05)

    def ensure(self) -> None:
        if self.sock is None:
            self.connect()

    def close(self, note: str = "closed") -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None
                self.transcript.log("ev", note=note)

    def reconnect(self, pause: float = 0.02) -> None:
        self.close("disconnected")
        self.reconnects += 1
        time.sleep(pause)
        self.connect()

    def send(self, data: bytes) -> None:
        self.ensure()
        self.transcript.log("tx", data)
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise LinkLost(str(exc)) from None

    def _fill(self, timeout: float) -> bool:
        self.sock.settimeout(max(timeout, 0.001))
        try:
            chunk = self.sock.recv(65536)
        except socket.timeout:
            return False
        except OSError as exc:
            raise LinkLost(str(exc)) from None
        if not chunk:
            raise LinkLost("peer closed")
        self.transcript.log("rx", chunk)
        self.buf += chunk
        return True

    def read_byte(self, timeout: float) -> Optional[int]:
        self.ensure()
        deadline = time.monotonic() + timeout
        while not self.buf:
            if not self._fill(deadline - time.monotonic()) and time.monotonic() >= deadline:
                return None
        b = self.buf[0]
        del self.buf[:1]
        return b

    def read_until(self, terminator: bytes, timeout: float) -> Optional[bytes]:
        self.ensure()
        deadline = time.monotonic() + timeout
        while True:
            i = self.buf.find(terminator)
            if i >= 0:
                out = bytes(self.buf[:i + len(terminator)])
                del self.buf[:i + len(terminator)]
                return out
            if not self._fill(deadline - time.monotonic()) and time.monotonic() >= deadline:
                return None


# ---------------------------------------------------------------- ASTM

def astm_checksum(body: bytes) -> bytes:
    total = 0
    for b in body:
        total += b
    return b"%02X" % (total % 256)


def astm_frame(number: int, text: bytes, last: bool = True) -> bytes:
    body = str(number % 8).encode() + text + bytes((ETX if last else ETB,))
    return bytes((STX,)) + body + astm_checksum(body) + b"\r\n"


def astm_frames(records: list[str], start: int = 1) -> list[bytes]:
    """One record per frame; records longer than a frame are split with ETB."""
    frames, n = [], start
    for rec in records:
        text = (rec + "\r").encode("latin-1")
        chunks = [text[i:i + MAX_FRAME_TEXT] for i in range(0, len(text), MAX_FRAME_TEXT)]
        for i, chunk in enumerate(chunks):
            frames.append(astm_frame(n, chunk, last=i == len(chunks) - 1))
            n += 1
    return frames


def corrupt(frame: bytes, rng: random.Random, lo: int = 2, hi_from_end: int = 5) -> bytes:
    """Change one text byte to a different letter; the check value no longer matches."""
    i = rng.randrange(lo, max(lo + 1, len(frame) - hi_from_end))
    old = frame[i]
    new = ord("A") + (old - ord("A") + 1 + rng.randrange(25)) % 26
    if new == old:
        new = ord("Z") if old != ord("Z") else ord("Y")
    return frame[:i] + bytes((new,)) + frame[i + 1:]


def parse_astm_frame(raw: bytes) -> Optional[tuple[int, bytes, bool]]:
    """(number, text, last) or None when the frame is damaged."""
    if len(raw) < 7 or raw[0] != STX or raw[-2:] != b"\r\n":
        return None
    term = raw[-5]
    if term not in (ETX, ETB):
        return None
    body = raw[1:-4]
    if astm_checksum(body) != raw[-4:-2]:
        return None
    return int(chr(raw[1])), raw[2:-5], term == ETX


# which field (1-based ASTM position) and component carry what, per order layout
ORDER_LAYOUTS = {
    "default": {"sample": (3, 1), "tests": (5, 4)},
    "class_a": {"sample": (4, 1), "tests": (5, 4)},
    "class_b": {"sample": (3, 2), "tests": (5, 4)},
}
RESULT_LAYOUTS = {
    "default": {"sample": (3, 1), "code": (3, 4)},
    "class_a": {"sample": (4, 1), "code": (3, 1)},
    "class_b": {"sample": (3, 2), "code": (3, 2)},
}


def _put(fields: list, position: int, component: int, value: str) -> None:
    while len(fields) < position:
        fields.append("")
    comps = fields[position - 1].split("^") if fields[position - 1] else []
    while len(comps) < component:
        comps.append("")
    comps[component - 1] = value
    fields[position - 1] = "^".join(comps)


def _esc(text: str) -> str:
    out = text.replace("&", "&E&")
    return out.replace("|", "&F&").replace("\\", "&R&").replace("^", "&S&")


def astm_result_records(sample_id: str, results: list[dict], layout: str = "default",
                        sender: str = "SIM", patient: str = "", stamp: str = "20240101120000") -> list[str]:
    lay = RESULT_LAYOUTS[layout]
    recs = [f"H|\\^&|||{sender}|||||||P|1|{stamp}", f"P|1||{_esc(patient)}"]
    order = ["O", "1"]
    _put(order, *lay["sample"], _esc(sample_id))
    recs.append("|".join(order))
    for i, r in enumerate(results, start=1):
        fields = ["R", str(i)]
        _put(fields, *lay["code"], _esc(r["code"]))
        _put(fields, 4, 1, _esc(str(r["value"])))
        _put(fields, 5, 1, _esc(r.get("unit") or ""))
        _put(fields, 6, 1, r.get("ref") or "")          # raw: '^' kept as written
        _put(fields, 7, 1, r.get("flag") or "")
        _put(fields, 9, 1, r.get("status") or "F")
        _put(fields, 11, 1, _esc(r.get("operator") or ""))
        _put(fields, 13, 1, r.get("completed") or stamp)
        recs.append("|".join(fields))
        if r.get("comment"):
            recs.append(f"C|1|I|{_esc(r['comment'])}|G")
    recs.append("L|1|N")
    return recs


def astm_query_records(sample_id: str, sender: str = "SIM", stamp: str = "20240101120000") -> list[str]:
    return [f"H|\\^&|||{sender}|||||||P|1|{stamp}", f"Q|1|^{_esc(sample_id)}||ALL", "L|1|N"]


def _field(rec: str, position: int, component: int = 1) -> str:
    parts = rec.split("|")
    if position > len(parts):
        return ""
    value = parts[position - 1]
    if "\\" in value and position != 2:
        value = value.split("\\")[0]
    comps = value.split("^")
    return comps[component - 1] if component <= len(comps) else ""


def read_orders(records: list[str], layout: str = "default") -> list[dict]:
    lay = ORDER_LAYOUTS[layout]
    orders = []
    for rec in records:
        if rec.startswith("O|"):
            pos, comp = lay["tests"]
            raw_tests = rec.split("|")[pos - 1] if len(rec.split("|")) >= pos else ""
            tests = []
            for rep in raw_tests.split("\\"):
                comps = rep.split("^")
                if len(comps) >= comp and comps[comp - 1]:
                    tests.append(comps[comp - 1])
            orders.append({"sample_id": _field(rec, *lay["sample"]), "tests": tests,
                           "priority": _field(rec, 6)})
    return orders


class AstmAnalyzer:
    def __init__(self, link: Link, rng: random.Random, faults: SimFaults = SimFaults(),
                 timeout: float = 15.0, layout: str = "default"):
        self.link, self.rng, self.faults = link, rng, faults
        self.timeout = timeout
        self.layout = layout
        self.corrupt_next = 0
        self.drop_next = False
        self.duplicate_next = False
        self.stats = {"frames": 0, "naks": 0, "resends": 0, "drops": 0, "messages": 0}

    def send_message(self, records: list[str], max_attempts: int = 200) -> None:
        frames = astm_frames(records)
        for _ in range(max_attempts):
            try:
                if self._transfer(frames):
                    self.stats["messages"] += 1
                    return
            except LinkLost as exc:
                self.link.transcript.log("ev", note=f"link lost: {exc}")
            self.link.reconnect()
        raise ConnectionError("message could not be delivered")

    def _establish(self) -> bool:
        for _ in range(100):
            self.link.send(bytes((ENQ,)))
            deadline = time.monotonic() + self.timeout
            while True:
                b = self.link.read_byte(max(0.0, deadline - time.monotonic()))
                if b is None:
                    return False
                if b == ACK:
                    return True
                if b == NAK:
                    time.sleep(0.05)
                    break
                # ENQ from the host (contention) or stray bytes: the host yields, keep waiting
        return False

    def _transfer(self, frames: list[bytes]) -> bool:
        self.link.ensure()
        drop_at = None
        if self.drop_next or (self.faults.connection_drop and self.rng.random() < self.faults.connection_drop):
            self.drop_next = False
            drop_at = self.rng.randrange(len(frames) + 1)
        if not self._establish():
            return False
        for i, frame in enumerate(frames):
            if i == drop_at:
                self.stats["drops"] += 1
                self.link.close("fault: connection dropped")
                raise LinkLost("fault injected")
            corruptions = naks = 0
            while True:
                data = frame
                damage = self.corrupt_next > 0 or (
                    self.faults.frame_corruption and self.rng.random() < self.faults.frame_corruption)
                if damage and corruptions < MAX_CORRUPTIONS:
                    self.corrupt_next = max(0, self.corrupt_next - 1)
                    corruptions += 1
                    data = corrupt(frame, self.rng)
                if self.faults.delay_ms:
                    time.sleep(self.faults.delay_ms / 1000.0)
                self.link.send(data)
                if self.duplicate_next:
                    self.duplicate_next = False
                    self.link.send(data)
                self.stats["frames"] += 1
                reply = self.link.read_byte(self.timeout)
                if reply == ACK or reply == EOT:
                    break
                if reply == NAK:
                    self.stats["naks"] += 1
                    naks += 1
                    if naks > MAX_CORRUPTIONS:
                        self.link.send(bytes((EOT,)))
                        return False
                    self.stats["resends"] += 1
                    continue
                # timeout: give up on this transfer
                self.link.send(bytes((EOT,)))
                return False
        if drop_at == len(frames):
            # lose the line before EOT: the last ACK may or may not have been seen
            self.stats["drops"] += 1
            self.link.close("fault: connection dropped")
            raise LinkLost("fault injected")
        self.link.send(bytes((EOT,)))
        return True

    def receive_message(self, timeout: float = 10.0) -> Optional[list[str]]:
        """Wait for the host to send a message (worklist download); returns its records."""
        deadline = time.monotonic() + timeout
        while True:
            b = self.link.read_byte(max(0.0, deadline - time.monotonic()))
            if b is None:
                return None
            if b == ENQ:
                break
        self.link.send(bytes((ACK,)))
        text = b""
        partial = b""
        while True:
            b = self.link.read_byte(self.timeout * 2)
            if b is None:
                return None
            if b == EOT:
                break
            if b != STX:
                continue
            rest = self.link.read_until(b"\r\n", self.timeout)
            if rest is None:
                return None
            parsed = parse_astm_frame(bytes((STX,)) + rest)
            if parsed is None:
                self.link.send(bytes((NAK,)))
                continue
            _, chunk, last = parsed
            partial += chunk
            if last:
                text += partial
                partial = b""
            self.link.send(bytes((ACK,)))
        return [r for r in text.decode("latin-1").split("\r") if r]

    def query(self, sample_id: str, timeout: float = 10.0, max_attempts: int = 200) -> Optional[list[str]]:
        """Send a query and wait for the reply; a lost line means asking again."""
        for _ in range(max_attempts):
            try:
                self.send_message(astm_query_records(sample_id))
                return self.receive_message(timeout)
            except LinkLost as exc:
                self.link.transcript.log("ev", note=f"link lost during query: {exc}")
                self.link.reconnect()
        raise ConnectionError("query could not be completed")


# ---------------------------------------------------------------- HL7

def hl7_oru(control_id: str, sample_id: str, results: list[dict], sender: str = "SIM",
            stamp: str = "20240101120000") -> bytes:
    def esc(t: str) -> str:
        return (t.replace("\\", "\\E\\").replace("|", "\\F\\").replace("^", "\\S\\")
                .replace("&", "\\T\\").replace("~", "\\R\\"))

    segs = [f"MSH|^~\\&|{sender}|LAB|GATEWAY|LAB|{stamp}||ORU^R01|{control_id}|P|2.3",
            f"PID|1||{esc(sample_id)}",
            f"OBR|1||{esc(sample_id)}"]
    for i, r in enumerate(results, start=1):
        vt = "NM" if _is_number(str(r["value"])) else "ST"
        segs.append("|".join([
            "OBX", str(i), vt, f"{esc(r['code'])}^{esc(r['code'])}", "", esc(str(r["value"])),
            esc(r.get("unit") or ""), esc(r.get("ref") or ""), r.get("flag") or "", "", "",
            r.get("status") or "F", "", "", r.get("completed") or stamp, "", esc(r.get("operator") or ""),
        ]))
    return ("\r".join(segs) + "\r").encode("latin-1")


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


class Hl7Analyzer:
    def __init__(self, link: Link, rng: random.Random, faults: SimFaults = SimFaults(), timeout: float = 10.0):
        self.link, self.rng, self.faults, self.timeout = link, rng, faults, timeout
        self.drop_next = False
        self.stats = {"messages": 0, "drops": 0, "acks": {}}

    def send_message(self, payload: bytes, max_attempts: int = 200) -> str:
        """Send one message, resending over a new connection until it is acknowledged."""
        for _ in range(max_attempts):
            try:
                self.link.ensure()
                drop = self.drop_next or (self.faults.connection_drop and
                                          self.rng.random() < self.faults.connection_drop)
                self.drop_next = False
                frame = bytes((VT,)) + payload + bytes((FS, CR))
                if drop:
                    cut = self.rng.randrange(len(frame) + 1)
                    self.link.send(frame[:cut])
                    self.stats["drops"] += 1
                    self.link.close("fault: connection dropped")
                    raise LinkLost("fault injected")
                self.link.send(frame)
                reply = self.link.read_until(bytes((FS, CR)), self.timeout)
                if reply is None:
                    raise LinkLost("no ACK")
                code = _msa_code(reply)
                self.stats["acks"][code] = self.stats["acks"].get(code, 0) + 1
                self.stats["messages"] += 1
                return code
            except LinkLost as exc:
                self.link.transcript.log("ev", note=f"link lost: {exc}")
                self.link.reconnect()
        raise ConnectionError("message could not be delivered")


def _msa_code(reply: bytes) -> str:
    text = reply.strip(bytes((VT, FS, CR))).decode("latin-1")
    for seg in text.split("\r"):
        if seg.startswith("MSA"):
            return seg.split("|")[1]
    return ""


# ---------------------------------------------------------------- generic frames

def generic_frame(values: dict, fmt: dict) -> bytes:
    order = fmt["field_order"]
    widths = fmt.get("field_widths")
    cols = []
    for i, role in enumerate(order):
        v = "" if role == "ignore" else str(values.get(role, ""))
        cols.append(v.ljust(widths[i]) if widths else v)
    payload = ("" if widths else chr(fmt["field_separator"])).join(cols).encode("latin-1")
    out = bytes((fmt.get("start_byte", STX),)) + payload + bytes((fmt.get("end_byte", ETX),))
    if fmt.get("has_bcc"):
        check = 0
        if fmt.get("bcc_kind", "xor") == "xor":
            for b in payload:
                check ^= b
        else:
            for b in payload:
                check = (check + b) & 0xFF
        out += bytes((check,))
    return out


class GenericAnalyzer:
    def __init__(self, link: Link, rng: random.Random, fmt: dict, faults: SimFaults = SimFaults(),
                 timeout: float = 10.0):
        self.link, self.rng, self.fmt, self.faults, self.timeout = link, rng, fmt, faults, timeout
        self.ack = fmt.get("ack_byte")
        self.nak = fmt.get("nak_byte")
        self.corrupt_next = 0
        self.drop_next = False
        self.stats = {"frames": 0, "naks": 0, "drops": 0, "messages": 0}

    def send_result(self, values: dict, max_attempts: int = 200) -> None:
        frame = generic_frame(values, self.fmt)
        tail = 2 if self.fmt.get("has_bcc") else 1
        corruptions = 0
        for _ in range(max_attempts):
            try:
                self.link.ensure()
                if self.drop_next or (self.faults.connection_drop and self.rng.random() < self.faults.connection_drop):
                    self.drop_next = False
                    self.link.send(frame[:self.rng.randrange(len(frame) + 1)])
                    self.stats["drops"] += 1
                    self.link.close("fault: connection dropped")
                    raise LinkLost("fault injected")
                data = frame
                damage = self.corrupt_next > 0 or (
                    self.faults.frame_corruption and self.rng.random() < self.faults.frame_corruption)
                if damage and corruptions < MAX_CORRUPTIONS and self.fmt.get("has_bcc"):
                    self.corrupt_next = max(0, self.corrupt_next - 1)
                    corruptions += 1
                    data = corrupt(frame, self.rng, lo=1, hi_from_end=tail)
                self.link.send(data)
                self.stats["frames"] += 1
                if self.ack is None:
                    self.stats["messages"] += 1
                    return
                reply = self.link.read_byte(self.timeout)
                if reply == self.ack:
                    self.stats["messages"] += 1
                    return
                if reply == self.nak:
                    self.stats["naks"] += 1
                    continue
                raise LinkLost(f"unexpected reply {reply!r}")
            except LinkLost as exc:
                self.link.transcript.log("ev", note=f"link lost: {exc}")
                self.link.reconnect()
        raise ConnectionError("result could not be delivered")


# ---------------------------------------------------------------- file-only

def upl_file(rows: list[dict], header: str = "sample\ttest\tvalue\tunit\tref\tflag\ttime") -> bytes:
    lines = [header]
    for r in rows:
        lines.append("\t".join([r["sample_id"], r["code"], str(r["value"]), r.get("unit") or "",
                                r.get("ref") or "", r.get("flag") or "", r.get("completed") or ""]))
    return ("\n".join(lines) + "\n").encode("latin-1")


# ---------------------------------------------------------------- script runner

@dataclass
class SimProfile:
    """Which simulator to run and how it encodes its messages."""

    kind: str                       # astm | hl7 | generic | file
    device_id: str = ""
    layout: str = "default"         # ASTM field layout variant
    generic_format: Optional[dict] = None
    operator_id: str = ""
    timeout: float = 15.0


@dataclass
class RunResult:
    transcript: Transcript
    stats: dict = field(default_factory=dict)
    orders: list = field(default_factory=list)     # per query: list of order dicts, [] for a no-order reply
    acks: list = field(default_factory=list)
    query_latency: list = field(default_factory=list)
    error: Optional[str] = None


def run_analyzer(profile: SimProfile, target: str, script: SimScript, seed: int = 0,
                 faults: SimFaults = SimFaults(), ingest: Optional[Callable[[bytes], dict]] = None,
                 connect_deadline: float = 30.0, raise_on_error: bool = True) -> RunResult:
    """Execute ``script`` against ``target`` (host:port) and return the transcript."""
    rng = random.Random(seed)
    transcript = Transcript(profile.device_id)
    host, _, port = target.rpartition(":")
    link = Link(host or "127.0.0.1", int(port), transcript, connect_deadline) if profile.kind != "file" else None
    result = RunResult(transcript)
    astm = AstmAnalyzer(link, rng, faults, profile.timeout, profile.layout) if profile.kind == "astm" else None
    hl7 = Hl7Analyzer(link, rng, faults) if profile.kind == "hl7" else None
    gen = GenericAnalyzer(link, rng, profile.generic_format or {}, faults) if profile.kind == "generic" else None
    sim = astm or hl7 or gen
    msg_no = 0
    try:
        for i, step in enumerate(script.steps):
            op = step["step"]
            if op == "pause":
                time.sleep(step.get("ms", 0) / 1000.0)
            elif op == "fault":
                kind = step["kind"]
                if kind == "drop_connection":
                    sim.drop_next = True
                elif kind == "corrupt_next_frame":
                    sim.corrupt_next += step.get("count", 1)
                elif kind == "duplicate_next_send":
                    sim.duplicate_next = True
                elif kind == "delay":
                    time.sleep(step.get("ms", 0) / 1000.0)
                elif kind == "disconnect":
                    link.close("fault: disconnect")
                else:
                    raise ValueError(f"unknown fault {kind!r}")
            elif op == "connect":
                link.connect()
            elif op == "send_control":
                link.send(bytes((byte_value(step["byte"]),)))
            elif op == "send_frame":
                text = step["text"].encode("latin-1")
                frame = astm_frame(step["frame_number"], text, step.get("terminator", "ETX") == "ETX")
                if astm is not None and astm.corrupt_next:
                    astm.corrupt_next -= 1
                    frame = corrupt(frame, rng)
                link.send(frame)
            elif op == "send_raw":
                link.send(bytes.fromhex(step["hex"]))
            elif op == "expect_control":
                want = byte_value(step["byte"])
                got = link.read_byte(step.get("timeout_ms", 5000) / 1000.0)
                if got != want:
                    raise ExpectationFailed(i, bytes((want,)), b"" if got is None else bytes((got,)))
            elif op == "expect_silence":
                got = link.read_byte(step.get("timeout_ms", 500) / 1000.0)
                if got is not None:
                    raise ExpectationFailed(i, b"", bytes((got,)))
            elif op == "expect_closed":
                try:
                    got = link.read_byte(step.get("timeout_ms", 2000) / 1000.0)
                except LinkLost:
                    link.close("closed by peer")
                    continue
                raise ExpectationFailed(i, b"", b"" if got is None else bytes((got,)), "connection still open")
            elif op == "send_message":
                msg_no += 1
                if profile.kind == "astm":
                    records = step.get("records") or astm_result_records(
                        step["sample_id"], step["results"], profile.layout, sender=profile.device_id,
                        patient=step.get("patient", ""))
                    astm.send_message(records)
                elif profile.kind == "hl7":
                    payload = step["raw"].encode("latin-1") if "raw" in step else hl7_oru(
                        step.get("control_id") or f"{profile.device_id}-{msg_no}", step["sample_id"],
                        step["results"], sender=profile.device_id)
                    code = hl7.send_message(payload)
                    result.acks.append(code)
                    if step.get("expect_ack") and code != step["expect_ack"]:
                        raise ExpectationFailed(i, step["expect_ack"].encode(), code.encode())
                elif profile.kind == "generic":
                    for r in step["results"]:
                        gen.send_result({"sample_id": step["sample_id"], "test_code": r["code"],
                                         "value": r["value"], "unit": r.get("unit") or "",
                                         "flag": r.get("flag") or "", "timestamp": r.get("completed") or "",
                                         "ref_range": r.get("ref") or ""})
                elif profile.kind == "file":
                    rows = [dict(r, sample_id=s["sample_id"]) for s in step["samples"] for r in s["results"]]
                    content = upl_file(rows)
                    transcript.log("tx", note=f"file {len(rows)} rows")
                    report = _ingest_with_retry(ingest, content)
                    result.acks.append(report)
            elif op == "query":
                t0 = time.monotonic()
                records = astm.query(step["sample_id"], step.get("timeout_ms", 10000) / 1000.0)
                result.query_latency.append(time.monotonic() - t0)
                if records is None:
                    raise ExpectationFailed(i, b"<order message>", b"", "no reply to query")
                orders = read_orders(records, profile.layout)
                result.orders.append(orders)
                if "expect_tests" in step:
                    want = step["expect_tests"]
                    got = orders[0]["tests"] if orders else None
                    if want is None and orders:
                        raise ExpectationFailed(i, b"<no order>", str(orders).encode())
                    if want is not None and (not orders or orders[0]["sample_id"] != step["sample_id"]
                                             or got != want):
                        raise ExpectationFailed(i, str(want).encode(), str(orders).encode())
            elif op == "expect_order":
                records = astm.receive_message(step.get("timeout_ms", 10000) / 1000.0)
                orders = read_orders(records or [], profile.layout)
                result.orders.append(orders)
                if not orders or orders[0]["sample_id"] != step["sample_id"]:
                    raise ExpectationFailed(i, step["sample_id"].encode(), str(orders).encode())
            else:
                raise ValueError(f"unknown step {op!r}")
    except Exception as exc:
        result.error = f"{type(exc).__name__}: {exc}"
        transcript.log("ev", note=f"error: {result.error}")
        if raise_on_error:
            raise
    finally:
        if link is not None:
            link.close()
        result.stats = dict(sim.stats) if sim is not None else {}
    return result


def _ingest_with_retry(ingest: Callable[[bytes], dict], content: bytes, deadline: float = 60.0) -> dict:
    from ..control import ControlError, GatewayNotRunning

    end = time.monotonic() + deadline
    while True:
        try:
            return ingest(content)
        except (GatewayNotRunning, ControlError) as exc:
            if isinstance(exc, ControlError) and exc.kind not in ("control_error", "io_error"):
                raise
            if time.monotonic() > end:
                raise
            time.sleep(0.1)


def now_stamp() -> str:
    return datetime.now().strftime("%Y%m%d%H%M%S")
