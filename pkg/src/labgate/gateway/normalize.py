"""RawResult -> ObservationResult."""
from __future__ import annotations

from datetime import datetime, timezone
from decimal import Decimal
from typing import Optional

from ..model import ABNORMAL_FLAGS, ObservationResult, RawResult, ResultStatus, parse_decimal, parse_ref_range
from ..registry import TestParameterMapping

FLAG_ALIASES = {"<": "L", ">": "H", "": None}
STATUS_MAP = {
    "F": ResultStatus.FINAL, "": ResultStatus.FINAL,
    "C": ResultStatus.CORRECTED,
    "P": ResultStatus.PRELIMINARY, "I": ResultStatus.PRELIMINARY,
    "S": ResultStatus.PRELIMINARY, "R": ResultStatus.PRELIMINARY,
}


def map_flag(raw: Optional[str], notes: list) -> Optional[str]:
    if raw is None:
        return None
    flag = raw.strip().upper()
    flag = FLAG_ALIASES.get(flag, flag)
    if flag is not None and flag not in ABNORMAL_FLAGS:
        notes.append(f"unknown abnormal flag {raw!r} dropped")
        return None
    return flag


def map_status(raw: Optional[str], notes: list) -> ResultStatus:
    code = (raw or "").strip().upper()
    status = STATUS_MAP.get(code)
    if status is None:
        notes.append(f"unknown result status {raw!r} treated as preliminary")
        return ResultStatus.PRELIMINARY
    return status


def scale(value: Decimal, factor: Decimal) -> Decimal:
    return value if factor == 1 else value * factor


def normalize(raw: RawResult, mapping: TestParameterMapping, gateway_id: str, sequence: int,
              received_at: Optional[datetime] = None) -> ObservationResult:
    notes = list(raw.notes)
    factor = mapping.conversion_factor
    number = parse_decimal(raw.value)
    if number is not None:
        value = scale(number, factor)
        unit = mapping.canonical_unit or raw.unit
    else:
        value = raw.value
        unit = raw.unit
        if factor != 1 or mapping.canonical_unit:
            notes.append(f"non-numeric value {raw.value!r} not converted")
    low, high = parse_ref_range(raw.ref_range_raw, "^", notes)
    if low is not None and number is not None:
        low, high = scale(low, factor), scale(high, factor)
    return ObservationResult(
        gateway_id=gateway_id,
        device_id=raw.device_id,
        sample_id=raw.sample_id,
        test_id=mapping.test_id,
        machine_test_code=raw.machine_test_code,
        value=value,
        received_at=received_at or datetime.now(timezone.utc),
        sequence=sequence,
        unit=unit,
        ref_low=low,
        ref_high=high,
        abnormal_flag=map_flag(raw.abnormal_flag, notes),
        result_status=map_status(raw.result_status, notes),
        observed_at=raw.observed_at,
        operator_id=raw.operator_id,
        notes=tuple(notes),
    )
