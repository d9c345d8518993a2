"""HIS wire format (schema version 1).

Numeric values travel as JSON numbers written from their exact decimal text,
and are read back as :class:`~decimal.Decimal`, so nothing is lost to floats.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timezone
from decimal import Decimal
from typing import Any, Optional

from ..model import ObservationResult, ResultStatus, WorklistOrder

SCHEMA_VERSION = 1
OBSERVATION_FIELDS = (
    "device_id", "sample_id", "test_id", "machine_test_code", "value", "unit", "ref_low", "ref_high",
    "abnormal_flag", "result_status", "observed_at", "received_at", "operator_id", "sequence",
)
ENVELOPE_FIELDS = ("schema_version", "gateway_id", "idempotency_key", "observations")


def dumps(obj: Any) -> str:
    """``json.dumps`` that writes Decimal values as bare JSON numbers."""
    if isinstance(obj, Decimal):
        if not obj.is_finite():
            raise ValueError(f"cannot encode {obj} as JSON")
        return str(obj)
    if isinstance(obj, dict):
        return "{" + ",".join(json.dumps(str(k)) + ":" + dumps(v) for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    return json.dumps(obj)


def loads(text: Any) -> Any:
    return json.loads(text, parse_float=Decimal)


def _ts(dt: Optional[datetime]) -> Optional[str]:
    if dt is None:
        return None
    if dt.tzinfo is not None:
        return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return dt.isoformat()


def _parse_ts(text: Optional[str]) -> Optional[datetime]:
    if text is None:
        return None
    if text.endswith("Z"):
        return datetime.strptime(text, "%Y-%m-%dT%H:%M:%S.%fZ").replace(tzinfo=timezone.utc)
    return datetime.fromisoformat(text)


def _num(v: Any) -> Any:
    if isinstance(v, bool):
        return v
    if isinstance(v, int):
        return Decimal(v)
    return v


def observation_to_wire(obs: ObservationResult) -> dict:
    return {
        "device_id": obs.device_id,
        "sample_id": obs.sample_id,
        "test_id": obs.test_id,
        "machine_test_code": obs.machine_test_code,
        "value": obs.value,
        "unit": obs.unit,
        "ref_low": obs.ref_low,
        "ref_high": obs.ref_high,
        "abnormal_flag": obs.abnormal_flag,
        "result_status": obs.result_status.value,
        "observed_at": _ts(obs.observed_at),
        "received_at": _ts(obs.received_at),
        "operator_id": obs.operator_id,
        "sequence": obs.sequence,
    }


def observation_from_wire(d: dict, gateway_id: str) -> ObservationResult:
    missing = [k for k in OBSERVATION_FIELDS if k not in d]
    if missing:
        raise ValueError(f"observation lacks {missing}")
    return ObservationResult(
        gateway_id=gateway_id,
        device_id=d["device_id"],
        sample_id=d["sample_id"],
        test_id=d["test_id"],
        machine_test_code=d["machine_test_code"],
        value=_num(d["value"]),
        unit=d["unit"],
        ref_low=_num(d["ref_low"]),
        ref_high=_num(d["ref_high"]),
        abnormal_flag=d["abnormal_flag"],
        result_status=ResultStatus(d["result_status"]),
        observed_at=_parse_ts(d["observed_at"]),
        received_at=_parse_ts(d["received_at"]),
        operator_id=d["operator_id"],
        sequence=int(d["sequence"]),
    )


def idempotency_key(gateway_id: str, device_id: str, first: int, last: int) -> str:
    return f"{gateway_id}:{device_id}:{first}-{last}"


@dataclass(frozen=True)
class UploadEnvelope:
    gateway_id: str
    device_id: str
    observations: tuple  # wire dicts, contiguous ascending sequences

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        if not self.observations:
            raise ValueError("envelope needs at least one observation")
        seqs = [o["sequence"] for o in self.observations]
        if seqs != list(range(seqs[0], seqs[0] + len(seqs))):
            raise ValueError("envelope sequences must be contiguous and ascending")
        if any(o["device_id"] != self.device_id for o in self.observations):
            raise ValueError("envelope mixes devices")

    @property
    def first(self) -> int:
        return self.observations[0]["sequence"]

    @property
    def last(self) -> int:
        return self.observations[-1]["sequence"]

    @property
    def idempotency_key(self) -> str:
        return idempotency_key(self.gateway_id, self.device_id, self.first, self.last)

    def to_body(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "gateway_id": self.gateway_id,
            "idempotency_key": self.idempotency_key,
            "observations": list(self.observations),
        }

    def to_json(self) -> bytes:
        return dumps(self.to_body()).encode()


def worklist_to_wire(order: WorklistOrder) -> dict:
    return {"sample_id": order.sample_id, "patient_ref": order.patient_ref,
            "tests": list(order.tests), "priority": order.priority.value}


def worklist_from_wire(d: dict) -> WorklistOrder:
    return WorklistOrder(d["sample_id"], tuple(d["tests"]), d.get("priority") or "routine", d.get("patient_ref"))
