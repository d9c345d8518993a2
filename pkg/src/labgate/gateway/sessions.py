"""One session per connected instrument.

A session owns the connection, the protocol state and the registry snapshot
taken when the instrument connected; a format change therefore applies from
the next connection on.
"""
from __future__ import annotations

import asyncio
import logging
import uuid
from collections import deque
from dataclasses import asdict, dataclass, fields, replace
from datetime import datetime, timezone
from typing import Optional

from ..astm import records as astm
from ..astm.stream import AstmTokenizer
from ..astm.transport import (
    ACK, ENQ, NAK, Abort, ArmTimer, ByteReceived, CancelTimer, DeliverMessage, FrameReceived, Phase,
    SendControl, SendFrame, SubmitMessage, TimerExpired, Timers, encode_frame, receiver, receiver_step,
    sender, sender_step,
)
from ..framing import FramingError, GenericStream, decode_one
from ..hl7 import Hl7Error, MllpStream, build_ack, build_reject, iter_results_hl7, mllp_encode, parse_hl7, \
    serialize_hl7
from ..registry import DeviceProfile, Registry
from ..uploader.client import HisError
from ..uploader.store import StorageFull
from .pipeline import Outcome, Pipeline

log = logging.getLogger(__name__)

WORKLIST_BUDGET = 5.0


@dataclass
class Counters:
    sessions: int = 0
    frames_ok: int = 0
    frames_nak: int = 0
    results_emitted: int = 0
    dead_lettered: int = 0
    duplicates: int = 0
    duplicate_results: int = 0
    messages: int = 0
    aborts: int = 0
    queries: int = 0
    orders_sent: int = 0
    no_order_replies: int = 0
    his_unreachable: int = 0

    def add(self, other: "Counters") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SessionContext:
    gateway_id: str
    pipeline: Pipeline
    his: object = None              # HisClient or None
    timers: Timers = Timers()
    worklist_budget: float = WORKLIST_BUDGET


class Session:
    protocol = ""

    def __init__(self, ctx: SessionContext, registry: Registry, device: DeviceProfile,
                 reader: asyncio.StreamReader, writer: asyncio.StreamWriter, totals: Optional[Counters] = None):
        self.ctx = ctx
        self.registry = registry
        self.device = device
        self.device_id = device.device_id
        self.format = registry.resolve_format(device.device_id)
        self.reader = reader
        self.writer = writer
        self.session_id = uuid.uuid4().hex[:12]
        self.started_at = datetime.now(timezone.utc)
        self.counters = Counters(sessions=1)
        self.totals = totals if totals is not None else Counters()
        self.totals.sessions += 1
        self._result_messages = 0

    def bump(self, name: str, n: int = 1) -> None:
        if n:
            setattr(self.counters, name, getattr(self.counters, name) + n)
            setattr(self.totals, name, getattr(self.totals, name) + n)

    def commit(self, items, payload: bytes, results_in_payload: int) -> Outcome:
        first = self._result_messages == 0
        self._result_messages += 1
        out = self.ctx.pipeline.process(self.registry, self.device_id, items, payload, first_in_session=first)
        self.bump("messages")
        if out.duplicate:
            self.bump("duplicates")
            self.bump("duplicate_results", results_in_payload)
        else:
            self.bump("results_emitted", out.emitted)
            self.bump("dead_lettered", out.dead_lettered)
        return out

    def write(self, data: bytes) -> None:
        self.writer.write(data)

    async def run(self) -> None:
        peer = self.writer.get_extra_info("peername")
        log.info("%s: session %s from %s (%s)", self.device_id, self.session_id, peer, self.format.format_id)
        try:
            await self._run()
        except (ConnectionError, asyncio.IncompleteReadError) as exc:
            log.info("%s: connection lost: %s", self.device_id, exc)
        except OSError as exc:
            # storage trouble: drop the line without acknowledging, the instrument resends
            log.error("%s: session aborted: %s", self.device_id, exc)
        finally:
            self._cleanup()
            try:
                self.writer.close()
                await self.writer.wait_closed()
            except (ConnectionError, OSError):
                pass
            log.info("%s: session %s closed %s", self.device_id, self.session_id, self.counters.to_dict())

    async def _run(self) -> None:
        raise NotImplementedError

    def _cleanup(self) -> None:
        pass


# ---------------------------------------------------------------- ASTM

class AstmSession(Session):
    protocol = "astm"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        timers = self.ctx.timers
        receive = self.device.comm_settings.timeout_ms / 1000.0
        if receive > 0:
            timers = replace(timers, receive=receive)
        self.layout = self.format.handle
        self.rx = receiver(timers)
        self.tx = sender(timers)
        self.tokenizer = AstmTokenizer()
        self.events: asyncio.Queue = asyncio.Queue()
        self._timer_handles: dict[str, Optional[asyncio.TimerHandle]] = {"rx": None, "tx": None}
        self._timer_tokens = {"rx": 0, "tx": 0}
        self._outbox: deque = deque()
        self._tasks: set = set()

    async def _read(self) -> None:
        try:
            while True:
                data = await self.reader.read(65536)
                if not data:
                    break
                self.events.put_nowait(("data", data))
        except (ConnectionError, OSError):
            pass
        self.events.put_nowait(("eof", None))

    async def _run(self) -> None:
        reader = asyncio.get_running_loop().create_task(self._read())
        self._tasks.add(reader)
        while True:
            kind, payload = await self.events.get()
            if kind == "eof":
                if self.rx.phase is not Phase.IDLE and (self.rx.received or self.rx.frames_accepted):
                    log.info("%s: connection dropped mid-message, partial data discarded", self.device_id)
                break
            if kind == "data":
                for event in self.tokenizer.feed(payload):
                    self._dispatch(event)
            elif kind == "timer":
                machine, token, event = payload
                if token == self._timer_tokens[machine]:
                    self._timer_handles[machine] = None
                    self._feed(machine, event)
            elif kind == "submit":
                self._outbox.append(payload)
            self._maybe_send()
            await self.writer.drain()

    def _cleanup(self) -> None:
        for machine in ("rx", "tx"):
            self._cancel_timer(machine)
        for t in list(self._tasks):
            t.cancel()

    def _dispatch(self, event) -> None:
        if self.tx.phase is not Phase.IDLE:
            if isinstance(event, ByteReceived) and event.byte == ENQ and self.tx.phase is Phase.ESTABLISH_WAIT:
                # line contention: the instrument wins
                self._feed("tx", event)
                self._feed("rx", event)
                return
            self._feed("tx", event)
            return
        self._feed("rx", event)

    def _feed(self, machine: str, event) -> None:
        if machine == "rx":
            self.rx, actions = receiver_step(self.rx, event, astm.is_complete_message)
            if isinstance(event, FrameReceived):
                for a in actions:
                    if isinstance(a, SendControl):
                        self.bump("frames_ok" if a.byte == ACK else "frames_nak")
        else:
            self.tx, actions = sender_step(self.tx, event)
        for action in actions:
            self._do(machine, action)

    def _do(self, machine: str, action) -> None:
        if isinstance(action, SendControl):
            self.write(bytes((action.byte,)))
        elif isinstance(action, SendFrame):
            self.write(encode_frame(action.frame))
        elif isinstance(action, DeliverMessage):
            self._on_message(action.message)
        elif isinstance(action, ArmTimer):
            self._cancel_timer(machine)
            token = self._timer_tokens[machine]
            event = TimerExpired(action.kind)
            self._timer_handles[machine] = asyncio.get_running_loop().call_later(
                action.duration, self.events.put_nowait, ("timer", (machine, token, event)))
        elif isinstance(action, CancelTimer):
            self._cancel_timer(machine)
        elif isinstance(action, Abort):
            self.bump("aborts")
            log.warning("%s: %s transfer aborted: %s", self.device_id, machine, action.reason)

    def _cancel_timer(self, machine: str) -> None:
        self._timer_tokens[machine] += 1
        handle = self._timer_handles[machine]
        if handle is not None:
            handle.cancel()
            self._timer_handles[machine] = None

    def _maybe_send(self) -> None:
        if self._outbox and self.rx.phase is Phase.IDLE and self.tx.phase is Phase.IDLE \
                and not self.tx.pending_frames:
            self._feed("tx", SubmitMessage(self._outbox.popleft()))

    def _on_message(self, message: bytes) -> None:
        try:
            msg = astm.parse_message(message, self.layout)
        except astm.AstmParseError as exc:
            n = sum(1 for line in message.split(b"\r") if line[:1] == b"R")
            log.warning("%s: unparseable message: %s", self.device_id, exc)
            self.commit([exc] * max(1, n), message, n)
            return
        if msg.is_query:
            for rec in msg.records:
                if rec.type == "Q":
                    self._on_query(rec.sample_id)
            return
        self.commit(list(astm.iter_results(msg, self.device_id)), message, astm.count_results(msg))

    def _on_query(self, sample_id: str) -> None:
        self.bump("queries")
        if self.device.mode != "bidirectional":
            log.warning("%s: query for %s from a unidirectional device ignored", self.device_id, sample_id)
            return
        task = asyncio.get_running_loop().create_task(self._answer(sample_id))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    async def _answer(self, sample_id: str) -> None:
        order = None
        try:
            if self.ctx.his is None:
                raise HisError("network_error", "no HIS configured")
            order = await asyncio.wait_for(self.ctx.his.fetch_worklist(sample_id, self.ctx.worklist_budget),
                                           self.ctx.worklist_budget)
        except (HisError, asyncio.TimeoutError) as exc:
            self.bump("his_unreachable")
            log.warning("%s: worklist fetch for %s failed: %s", self.device_id, sample_id, exc)
        if order is not None:
            order = self._to_machine_codes(order)
            msg = astm.build_order_message(order, layout=self.layout, sender_name=self.ctx.gateway_id)
            self.bump("orders_sent")
        else:
            msg = astm.build_no_order_message(sender_name=self.ctx.gateway_id)
            self.bump("no_order_replies")
        self.events.put_nowait(("submit", astm.serialize_message(msg)))

    def _to_machine_codes(self, order):
        """The HIS may name tests by canonical test_id; the instrument needs its own codes."""
        reverse = {m.test_id: code for (dev, code), m in self.registry.mappings.items() if dev == self.device_id}
        tests = tuple(dict.fromkeys(reverse.get(t, t) for t in order.tests))
        return replace(order, tests=tests) if tests != order.tests else order


# ---------------------------------------------------------------- HL7

class Hl7Session(Session):
    protocol = "hl7"

    async def _run(self) -> None:
        stream = MllpStream()
        while True:
            data = await self.reader.read(65536)
            if not data:
                return
            for payload in stream.feed(data):
                ack = self._on_message(payload)
                self.write(mllp_encode(serialize_hl7(ack)))
            await self.writer.drain()

    def _on_message(self, payload: bytes):
        try:
            msg = parse_hl7(payload)
        except Hl7Error as exc:
            self.bump("frames_nak")
            return build_reject(text=exc.kind)
        if msg.message_type != "ORU^R01":
            self.bump("frames_nak")
            return build_ack(msg, "AR", text=f"unsupported message type {msg.message_type}")
        self.bump("frames_ok")
        try:
            self.commit(list(iter_results_hl7(msg, self.device_id)), payload, len(msg.find("OBX")))
        except StorageFull as exc:
            log.error("%s: %s", self.device_id, exc)
            return build_ack(msg, "AE", text="storage full")
        return build_ack(msg, "AA")


# ---------------------------------------------------------------- generic frames

class GenericSession(Session):
    protocol = "generic"

    async def _run(self) -> None:
        desc = self.format.handle
        stream = GenericStream(desc)
        verify = self.device.comm_settings.bcc_check
        while True:
            data = await self.reader.read(65536)
            if not data:
                return
            for frame in stream.feed(data):
                try:
                    raw = decode_one(frame, desc, self.device_id, verify_bcc=verify)
                except FramingError as exc:
                    if exc.kind in ("bcc_mismatch", "bad_envelope"):
                        self.bump("frames_nak")
                        if desc.nak_byte is not None:
                            self.write(bytes((desc.nak_byte,)))
                        continue
                    items = [exc]
                except (ValueError, UnicodeDecodeError) as exc:
                    items = [FramingError("malformed", str(exc))]
                else:
                    items = [raw]
                self.bump("frames_ok")
                try:
                    self.commit(items, frame, 1)
                except StorageFull as exc:
                    log.error("%s: %s", self.device_id, exc)
                    if desc.nak_byte is not None:
                        self.write(bytes((desc.nak_byte,)))
                    continue
                if desc.ack_byte is not None:
                    self.write(bytes((desc.ack_byte,)))
            await self.writer.drain()


SESSION_TYPES = {"astm": AstmSession, "hl7": Hl7Session, "generic": GenericSession}
