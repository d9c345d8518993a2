"""Simulator scripts: one JSON object per line, each with a ``step`` key.

Low-level steps: send_control, send_frame, send_raw, expect_control,
expect_silence, expect_closed, expect_order, pause, fault, connect.
High-level steps: send_message (a whole result message with the protocol's
handshake and resend rules) and query (ASTM worklist query plus download).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Union

CONTROL_NAMES = {"ENQ": 0x05, "ACK": 0x06, "NAK": 0x15, "EOT": 0x04, "STX": 0x02, "ETX": 0x03, "ETB": 0x17}
STEPS = ("send_control", "send_frame", "send_raw", "expect_control", "expect_silence", "expect_closed",
         "expect_order", "pause", "fault", "connect", "send_message", "query")
FAULTS = ("drop_connection", "corrupt_next_frame", "delay", "duplicate_next_send", "disconnect")


def byte_value(b: Union[int, str]) -> int:
    if isinstance(b, int):
        return b
    if b.upper() in CONTROL_NAMES:
        return CONTROL_NAMES[b.upper()]
    return int(b, 0)


@dataclass
class SimScript:
    steps: list = field(default_factory=list)

    def __post_init__(self):
        for i, s in enumerate(self.steps):
            if s.get("step") not in STEPS:
                raise ValueError(f"step {i}: unknown step {s.get('step')!r}")
            if s["step"] == "fault" and s.get("kind") not in FAULTS:
                raise ValueError(f"step {i}: unknown fault {s.get('kind')!r}")

    def add(self, step: str, **kw) -> "SimScript":
        self.steps.append({"step": step, **kw})
        self.__post_init__()
        return self

    def dumps(self) -> str:
        return "".join(json.dumps(s, sort_keys=True) + "\n" for s in self.steps)

    @classmethod
    def loads(cls, text: str) -> "SimScript":
        steps = []
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                steps.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"script line {n}: {exc.msg}") from None
        return cls(steps)

    @classmethod
    def load(cls, path) -> "SimScript":
        with open(path) as fh:
            return cls.loads(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def of(cls, steps: Iterable[dict]) -> "SimScript":
        return cls(list(steps))
