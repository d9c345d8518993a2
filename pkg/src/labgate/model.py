"""Shared value types: raw instrument results, normalized observations, worklist orders."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from datetime import datetime
from decimal import Decimal, InvalidOperation
from typing import Optional, Union

Value = Union[Decimal, str]

ABNORMAL_FLAGS = ("N", "L", "H", "LL", "HH", "A")


class Source(str, enum.Enum):
    STREAM = "stream"
    FILE = "file"


class ResultStatus(str, enum.Enum):
    FINAL = "final"
    PRELIMINARY = "preliminary"
    CORRECTED = "corrected"


class Priority(str, enum.Enum):
    ROUTINE = "routine"
    STAT = "stat"


@dataclass(frozen=True)
class RawResult:
    """One result exactly as the instrument reported it."""

    device_id: str
    sample_id: str
    machine_test_code: str
    value: str
    unit: Optional[str] = None
    ref_range_raw: Optional[str] = None
    abnormal_flag: Optional[str] = None
    result_status: Optional[str] = None
    observed_at: Optional[datetime] = None
    source: Source = Source.STREAM
    operator_id: Optional[str] = None
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.sample_id:
            raise ValueError("sample_id must be non-empty")
        if not self.machine_test_code:
            raise ValueError("machine_test_code must be non-empty")


@dataclass(frozen=True)
class ObservationResult:
    gateway_id: str
    device_id: str
    sample_id: str
    test_id: str
    machine_test_code: str
    value: Value
    received_at: datetime
    sequence: int
    unit: Optional[str] = None
    ref_low: Optional[Decimal] = None
    ref_high: Optional[Decimal] = None
    abnormal_flag: Optional[str] = None
    result_status: ResultStatus = ResultStatus.FINAL
    observed_at: Optional[datetime] = None
    operator_id: Optional[str] = None
    # Local annotations only; never sent on the wire.
    notes: tuple[str, ...] = field(default=(), compare=False)


@dataclass(frozen=True)
class WorklistOrder:
    sample_id: str
    tests: tuple[str, ...]
    priority: Priority = Priority.ROUTINE
    patient_ref: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "tests", tuple(self.tests))
        object.__setattr__(self, "priority", Priority(self.priority))
        if not self.sample_id:
            raise ValueError("sample_id must be non-empty")
        if not self.tests:
            raise ValueError("a worklist order needs at least one test")
        if len(set(self.tests)) != len(self.tests):
            raise ValueError(f"duplicate tests in order for {self.sample_id}")


def validate_observation(obs: ObservationResult) -> list[str]:
    """Return every invariant violation; an empty list means the observation is valid."""
    problems = []
    if not obs.test_id:
        problems.append("test_id missing")
    if not obs.sample_id:
        problems.append("sample_id missing")
    if not obs.device_id:
        problems.append("device_id missing")
    if not obs.gateway_id:
        problems.append("gateway_id missing")
    if not obs.machine_test_code:
        problems.append("machine_test_code missing")
    if obs.received_at is None:
        problems.append("received_at missing")
    if obs.ref_low is not None and obs.ref_high is not None and obs.ref_low > obs.ref_high:
        problems.append("ref_low > ref_high")
    if obs.abnormal_flag is not None and obs.abnormal_flag not in ABNORMAL_FLAGS:
        problems.append(f"abnormal_flag {obs.abnormal_flag!r} not one of {', '.join(ABNORMAL_FLAGS)}")
    if not isinstance(obs.result_status, ResultStatus):
        problems.append(f"result_status {obs.result_status!r} invalid")
    if not isinstance(obs.sequence, int) or isinstance(obs.sequence, bool) or obs.sequence < 0:
        problems.append("sequence must be a non-negative integer")
    if not isinstance(obs.value, (Decimal, str)):
        problems.append("value must be decimal or text")
    return problems


_NUMBER = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)"
_RANGE_FORMS = [
    re.compile(rf"^\s*({_NUMBER})\s*to\s*({_NUMBER})\s*$", re.IGNORECASE),
    # The dash form must not swallow a leading minus sign of the upper bound.
    re.compile(rf"^\s*({_NUMBER})\s*-\s*({_NUMBER})\s*$"),
]


def parse_decimal(text: Optional[str]) -> Optional[Decimal]:
    if text is None:
        return None
    text = text.strip()
    if not re.fullmatch(_NUMBER, text):
        return None
    try:
        return Decimal(text)
    except InvalidOperation:
        return None


def parse_ref_range(raw: Optional[str], delimiter_hint: str = "^",
                    notes: Optional[list] = None) -> tuple[Optional[Decimal], Optional[Decimal]]:
    """Parse ``L^H``, ``L-H`` and ``L to H`` reference ranges.

    Never raises. Unrecognized or inverted ranges come back as ``(None, None)``
    and, if ``notes`` is given, a note describing why is appended to it.
    """
    if not raw or not raw.strip():
        return None, None
    low = high = None
    if delimiter_hint and delimiter_hint in raw:
        parts = raw.split(delimiter_hint)
        if len(parts) == 2:
            low, high = parse_decimal(parts[0]), parse_decimal(parts[1])
    if low is None or high is None:
        low = high = None
        for form in _RANGE_FORMS:
            m = form.match(raw)
            if m:
                low, high = Decimal(m.group(1)), Decimal(m.group(2))
                break
    if low is None or high is None:
        if notes is not None:
            notes.append(f"unrecognized reference range {raw!r}")
        return None, None
    if low > high:
        if notes is not None:
            notes.append(f"inverted reference range {raw!r}")
        return None, None
    return low, high
