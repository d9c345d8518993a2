"""Turn a raw ASTM byte stream into transport events.

Outside a frame, ENQ/ACK/NAK/EOT become :class:`ByteReceived`. A frame runs
from STX to the LF following its checksum. Anything else between frames is
line noise and is counted, not delivered.
"""
from __future__ import annotations

from typing import Optional

from .. import kernels
from .transport import (
    CONTROL_BYTES, ETB, ETX, MAX_TEXT, STX, ByteReceived, Event, FrameError, FrameReceived,
    decode_frame,
)

_FRAME_START_OR_CONTROL = bytes((STX,) + CONTROL_BYTES)
_TERMINATORS = bytes((ETX, ETB))
# STX + digit + text + ETX + 2 checksum chars + CR LF
_MAX_FRAME = MAX_TEXT + 7


class AstmTokenizer:
    def __init__(self):
        self._buf = bytearray()
        self.noise_bytes = 0

    def feed(self, data: bytes) -> list[Event]:
        self._buf += data
        events: list[Event] = []
        while self._buf:
            if self._buf[0] != STX:
                i = kernels.find_any(bytes(self._buf), _FRAME_START_OR_CONTROL)
                if i < 0:
                    self.noise_bytes += len(self._buf)
                    self._buf.clear()
                    break
                self.noise_bytes += i
                del self._buf[:i]
                if self._buf[0] != STX:
                    events.append(ByteReceived(self._buf[0]))
                    del self._buf[:1]
                    continue
            end = self._frame_end()
            if end is None:
                break
            raw = bytes(self._buf[:end])
            del self._buf[:end]
            events.append(_frame_event(raw))
        return events

    def _frame_end(self) -> Optional[int]:
        """Length of the frame at the buffer head, or None if more bytes are needed."""
        buf = bytes(self._buf[:_MAX_FRAME + 1])
        t = kernels.find_any(buf, _TERMINATORS, 1)
        if t < 0:
            if len(buf) > _MAX_FRAME:
                # Runaway frame with no terminator: cut at the next STX and NAK it.
                nxt = buf.find(bytes((STX,)), 1)
                return nxt if nxt > 0 else len(buf)
            return None
        if len(buf) < t + 5:
            return None
        return t + 5

    @property
    def pending(self) -> int:
        return len(self._buf)


def _frame_event(raw: bytes) -> FrameReceived:
    try:
        return FrameReceived(decode_frame(raw))
    except FrameError as exc:
        return FrameReceived(None, exc)
