"""Extract, normalize and commit one delivered message."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Optional, Union

from ..model import RawResult
from ..registry import Registry, RegistryError
from ..uploader.queue import DurableQueue
from .normalize import normalize

log = logging.getLogger(__name__)


def digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def dead_letter(device_id: str, payload: Union[bytes, str], reason: str, detail: str = "",
                when: Optional[datetime] = None) -> dict:
    if isinstance(payload, bytes):
        payload = payload.decode("latin-1")
    return {
        "device_id": device_id,
        "payload": payload,
        "reason": reason,
        "detail": detail,
        "occurred_at": (when or datetime.now(timezone.utc)).isoformat(),
    }


@dataclass
class Outcome:
    emitted: int = 0
    dead_lettered: int = 0
    duplicate: bool = False
    first_sequence: Optional[int] = None
    notes: list = field(default_factory=list)


class Pipeline:
    def __init__(self, gateway_id: str, queue: DurableQueue):
        self.gateway_id = gateway_id
        self.queue = queue

    def process(self, registry: Registry, device_id: str, items: Iterable[Union[RawResult, Exception]],
                payload: bytes, first_in_session: bool = False, file: bool = False,
                payload_digest: Optional[str] = None) -> Outcome:
        """Normalize every item and commit results plus dead letters in one write.

        ``items`` holds RawResults and the parse errors met while extracting
        them. A message equal to the device's last committed one that opens a
        new session is a retransmission of something already stored; it is
        skipped.
        """
        d = payload_digest or digest(payload)
        if file:
            if self.queue.file_seen(device_id, d):
                return Outcome(duplicate=True)
        elif self.queue.is_duplicate(device_id, d, first_in_session):
            log.info("%s: skipping retransmitted message %s", device_id, d[:12])
            return Outcome(duplicate=True)

        now = datetime.now(timezone.utc)
        mapped, dead = [], []
        for item in items:
            if isinstance(item, Exception):
                dead.append(dead_letter(device_id, payload, getattr(item, "kind", "parse_error"), str(item), now))
                continue
            try:
                mapping = registry.map_test_code(device_id, item.machine_test_code)
            except RegistryError as exc:
                dead.append(dead_letter(device_id, payload, exc.kind,
                                        f"sample {item.sample_id} code {item.machine_test_code}", now))
                continue
            mapped.append((item, mapping))

        def build(first: int):
            return [normalize(raw, m, self.gateway_id, first + i, now) for i, (raw, m) in enumerate(mapped)]

        receipt = self.queue.commit(device_id, build, digest=d, file=file, dead=dead)
        out = Outcome(emitted=len(mapped), dead_lettered=len(dead))
        if receipt is not None and mapped:
            out.first_sequence = receipt.first_sequence
        return out
