"""Low-level ASTM E1381 style transport.

Frame codec plus two pure state machines (receiver and sender). Neither owns a
socket or a clock: they consume :class:`Event` values and return the new state
with an ordered list of :class:`Action` values for the host to carry out.

Transition tables
-----------------

Receiver (gateway side of an analyzer upload)::

    idle      ENQ                    -> receive   ACK, arm(receive)
    idle      anything else          -> idle      (ignored)
    receive   frame, number ok       -> receive   [deliver if complete], ACK, arm(receive)
    receive   frame, previous number -> receive   ACK, arm(receive)      duplicate, discarded
    receive   bad frame / wrong num  -> receive   NAK
    receive   EOT                    -> idle      cancel, deliver complete part [, abort]
    receive   timer(receive)         -> idle      abort(receive_timeout)
    receive   other control byte     -> receive   (ignored)

Sender (gateway side of a worklist download)::

    idle            submit               -> establish_wait  ENQ, arm(establish)
    idle            timer(backoff)       -> establish_wait  ENQ, arm(establish)   if frames pending
    establish_wait  ACK                  -> transfer        send frame 1, arm(transfer)
    establish_wait  ENQ                  -> idle            arm(backoff)          contention, we yield
    establish_wait  NAK                  -> idle            arm(backoff)          receiver busy
    establish_wait  timer(establish)     -> idle            abort(establish_timeout), EOT
    transfer        ACK, more frames     -> transfer        send next, arm(transfer)
    transfer        ACK, last frame      -> idle            cancel, EOT
    transfer        NAK/other/timer      -> transfer        resend, arm(transfer)  while retries < 6
    transfer        NAK/other/timer      -> idle            abort(max_retries), EOT
    any non-idle    submit               -> unchanged       abort(busy)
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

from .. import kernels

ENQ, ACK, NAK, EOT = 0x05, 0x06, 0x15, 0x04
STX, ETX, ETB, CR, LF = 0x02, 0x03, 0x17, 0x0D, 0x0A
CONTROL_BYTES = (ENQ, ACK, NAK, EOT)

MAX_TEXT = 240
MAX_RETRIES = 6


class FrameError(ValueError):
    """A frame that cannot be accepted. ``kind`` names the failure."""

    def __init__(self, kind: str, detail: str = "", frame_number: Optional[int] = None):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind
        self.frame_number = frame_number


class Terminator(enum.Enum):
    INTERMEDIATE = ETB
    FINAL = ETX


@dataclass(frozen=True)
class Frame:
    frame_number: int
    text: bytes
    terminator: Terminator = Terminator.FINAL

    def __post_init__(self):
        if not 0 <= self.frame_number <= 7:
            raise ValueError(f"frame number {self.frame_number} outside 0-7")

    @property
    def checksum(self) -> str:
        return checksum(self.frame_number, self.text, self.terminator)


def checksum(frame_number: int, text: bytes, terminator: Terminator) -> str:
    """Sum of the frame number character, the text and the ETX/ETB byte, mod 256, as two hex digits."""
    total = (48 + frame_number + kernels.sum_mod256(text) + terminator.value) & 0xFF
    return f"{total:02X}"


def encode_frame(f: Frame) -> bytes:
    if len(f.text) > MAX_TEXT:
        raise FrameError("text_too_long", f"{len(f.text)} bytes", f.frame_number)
    return b"".join((
        bytes((STX, 48 + f.frame_number)),
        f.text,
        bytes((f.terminator.value,)),
        f.checksum.encode("ascii"),
        b"\r\n",
    ))


def decode_frame(data: bytes, expected_number: Optional[int] = None) -> Frame:
    """Decode one complete frame.

    ``expected_number`` of None skips the sequence check (the receiver state
    machine does its own, since it must tell duplicates from gaps).
    """
    if len(data) < 7 or data[0] != STX or data[-2:] != b"\r\n":
        raise FrameError("bad_envelope", "missing STX or CR LF")
    term_byte = data[-5]
    if term_byte not in (ETX, ETB):
        raise FrameError("bad_envelope", "missing ETX/ETB")
    digit = data[1]
    if not 48 <= digit <= 55:
        raise FrameError("bad_envelope", f"frame number byte 0x{digit:02X}")
    number = digit - 48
    text = bytes(data[2:-5])
    if len(text) > MAX_TEXT:
        raise FrameError("text_too_long", f"{len(text)} bytes", number)
    terminator = Terminator(term_byte)
    got = bytes(data[-4:-2]).decode("ascii", "replace").upper()
    want = checksum(number, text, terminator)
    if got != want:
        raise FrameError("checksum_mismatch", f"got {got} want {want}", number)
    if expected_number is not None and number != expected_number:
        raise FrameError("sequence_mismatch", f"got {number} want {expected_number}", number)
    return Frame(number, text, terminator)


def split_message(message: bytes, max_text: int = MAX_TEXT) -> list[Frame]:
    """Split a message into frames numbered 1,2,...,7,0,...; ETB on all but the last."""
    chunks = [message[i:i + max_text] for i in range(0, len(message), max_text)] or [b""]
    last = len(chunks) - 1
    return [
        Frame((i + 1) % 8, chunk, Terminator.FINAL if i == last else Terminator.INTERMEDIATE)
        for i, chunk in enumerate(chunks)
    ]


# ---------------------------------------------------------------- events / actions

@dataclass(frozen=True)
class ByteReceived:
    byte: int


@dataclass(frozen=True)
class FrameReceived:
    frame: Optional[Frame]
    error: Optional[FrameError] = None


@dataclass(frozen=True)
class TimerExpired:
    kind: str


@dataclass(frozen=True)
class SubmitMessage:
    message: bytes


Event = Union[ByteReceived, FrameReceived, TimerExpired, SubmitMessage]


@dataclass(frozen=True)
class SendControl:
    byte: int


@dataclass(frozen=True)
class SendFrame:
    frame: Frame


@dataclass(frozen=True)
class DeliverMessage:
    message: bytes


@dataclass(frozen=True)
class ArmTimer:
    kind: str
    duration: float


@dataclass(frozen=True)
class CancelTimer:
    pass


@dataclass(frozen=True)
class Abort:
    reason: str


Action = Union[SendControl, SendFrame, DeliverMessage, ArmTimer, CancelTimer, Abort]


@dataclass(frozen=True)
class Timers:
    establish: float = 15.0
    transfer: float = 15.0
    receive: float = 30.0
    backoff: float = 20.0


DEFAULT_TIMERS = Timers()


class Role(enum.Enum):
    RECEIVER = "receiver"
    SENDER = "sender"


class Phase(enum.Enum):
    IDLE = "idle"
    ESTABLISH_WAIT = "establish_wait"
    TRANSFER = "transfer"
    RECEIVE = "receive"
    TERMINATION = "termination"


@dataclass(frozen=True)
class TransportState:
    role: Role
    phase: Phase = Phase.IDLE
    expected_frame_number: int = 1
    retry_count: int = 0
    pending_frames: tuple[Frame, ...] = ()
    timer: Optional[str] = None
    # receiver: texts accepted so far; ``complete`` counts those ending in a final frame
    received: tuple[bytes, ...] = ()
    complete: int = 0
    frames_accepted: int = 0
    timers: Timers = field(default=DEFAULT_TIMERS, compare=False)


def receiver(timers: Timers = DEFAULT_TIMERS) -> TransportState:
    return TransportState(Role.RECEIVER, timers=timers)


def sender(timers: Timers = DEFAULT_TIMERS) -> TransportState:
    return TransportState(Role.SENDER, timers=timers)


CompletePredicate = Callable[[bytes], bool]


def receiver_step(state: TransportState, event: Event,
                  is_complete: Optional[CompletePredicate] = None) -> tuple[TransportState, list[Action]]:
    """Advance the receiver.

    ``is_complete`` lets the host recognise a finished message before EOT
    arrives, so it can commit the message before the last frame is ACKed.
    Without it, messages are delivered on EOT only.
    """
    if state.role is not Role.RECEIVER:
        raise ValueError("receiver_step needs a receiver state")
    t = state.timers

    if state.phase is Phase.IDLE:
        if isinstance(event, ByteReceived) and event.byte == ENQ:
            new = replace(state, phase=Phase.RECEIVE, expected_frame_number=1, retry_count=0,
                          received=(), complete=0, frames_accepted=0, timer="receive")
            return new, [SendControl(ACK), ArmTimer("receive", t.receive)]
        return state, []

    if state.phase is not Phase.RECEIVE:
        return state, []

    if isinstance(event, FrameReceived):
        frame = event.frame
        if frame is None or event.error is not None:
            return _nak(state)
        previous = (state.expected_frame_number - 1) % 8
        if frame.frame_number == previous and state.frames_accepted:
            # Sender missed our ACK and resent; acknowledge and drop it.
            return replace(state, retry_count=0), [SendControl(ACK), ArmTimer("receive", t.receive)]
        if frame.frame_number != state.expected_frame_number:
            return _nak(state)
        received = state.received + (frame.text,)
        complete = state.complete
        actions: list[Action] = []
        if frame.terminator is Terminator.FINAL:
            complete = len(received)
            if is_complete is not None:
                message = b"".join(received)
                if is_complete(message):
                    actions.append(DeliverMessage(message))
                    received, complete = (), 0
        new = replace(state, expected_frame_number=(frame.frame_number + 1) % 8, retry_count=0,
                      received=received, complete=complete, timer="receive",
                      frames_accepted=state.frames_accepted + 1)
        actions += [SendControl(ACK), ArmTimer("receive", t.receive)]
        return new, actions

    if isinstance(event, ByteReceived):
        if event.byte == EOT:
            actions = [CancelTimer()]
            done = b"".join(state.received[:state.complete])
            if done:
                actions.append(DeliverMessage(done))
            if state.complete < len(state.received):
                actions.append(Abort("incomplete_message"))
            return _idle(state), actions
        return state, []

    if isinstance(event, TimerExpired) and event.kind == "receive":
        return _idle(state), [Abort("receive_timeout")]

    return state, []


def _nak(state: TransportState) -> tuple[TransportState, list[Action]]:
    return replace(state, retry_count=min(state.retry_count + 1, MAX_RETRIES)), [SendControl(NAK)]


def _idle(state: TransportState) -> TransportState:
    return replace(state, phase=Phase.IDLE, expected_frame_number=1, retry_count=0,
                   received=(), complete=0, frames_accepted=0, timer=None, pending_frames=())


def sender_step(state: TransportState, event: Event) -> tuple[TransportState, list[Action]]:
    if state.role is not Role.SENDER:
        raise ValueError("sender_step needs a sender state")
    t = state.timers

    if isinstance(event, SubmitMessage):
        if state.phase is not Phase.IDLE or state.pending_frames:
            return state, [Abort("busy")]
        frames = tuple(split_message(event.message))
        new = replace(state, phase=Phase.ESTABLISH_WAIT, pending_frames=frames,
                      expected_frame_number=frames[0].frame_number, retry_count=0, timer="establish")
        return new, [SendControl(ENQ), ArmTimer("establish", t.establish)]

    if state.phase is Phase.IDLE:
        if isinstance(event, TimerExpired) and event.kind == "backoff" and state.pending_frames:
            new = replace(state, phase=Phase.ESTABLISH_WAIT, timer="establish")
            return new, [SendControl(ENQ), ArmTimer("establish", t.establish)]
        return state, []

    if state.phase is Phase.ESTABLISH_WAIT:
        if isinstance(event, ByteReceived):
            if event.byte == ACK:
                first = state.pending_frames[0]
                new = replace(state, phase=Phase.TRANSFER, retry_count=0, timer="transfer")
                return new, [SendFrame(first), ArmTimer("transfer", t.transfer)]
            if event.byte in (ENQ, NAK):
                # Contention or busy receiver: the analyzer wins, we retry later.
                new = replace(state, phase=Phase.IDLE, timer="backoff")
                return new, [ArmTimer("backoff", t.backoff)]
            return state, []
        if isinstance(event, TimerExpired) and event.kind == "establish":
            return _idle(state), [Abort("establish_timeout"), SendControl(EOT)]
        return state, []

    if state.phase is Phase.TRANSFER:
        current = state.pending_frames[0]
        if isinstance(event, ByteReceived) and event.byte == ACK:
            rest = state.pending_frames[1:]
            if not rest:
                return _idle(state), [CancelTimer(), SendControl(EOT)]
            new = replace(state, pending_frames=rest, expected_frame_number=rest[0].frame_number,
                          retry_count=0, timer="transfer")
            return new, [SendFrame(rest[0]), ArmTimer("transfer", t.transfer)]
        if isinstance(event, (ByteReceived, FrameReceived)) or (
                isinstance(event, TimerExpired) and event.kind == "transfer"):
            if state.retry_count >= MAX_RETRIES:
                return _idle(state), [Abort("max_retries"), SendControl(EOT)]
            new = replace(state, retry_count=state.retry_count + 1, timer="transfer")
            return new, [SendFrame(current), ArmTimer("transfer", t.transfer)]
        return state, []

    return state, []
