"""Durable store-and-forward queue.

Everything the uploader knows lives in one :class:`AppendLog`:

``obs``   observations committed for a device (one record per message or file)
``env``   an envelope was formed over a sequence range (so a restart resends
          exactly the same range under the same idempotency key)
``ack``   the HIS accepted an envelope
``park``  the HIS rejected an envelope (4xx); it needs a human
``dead``  dead letters (results that could not be normalized)
``drain`` dead letters up to an id were exported
``mark``  per-device watermark written by compaction

Dead letters of a message ride in the same ``obs`` record as its
observations, so both are committed by one write.

Callers must not interleave commits for one device from several threads; the
gateway runs all commits on its event loop, the lock only guards against the
control endpoint thread.
"""
from __future__ import annotations

import logging
import os
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from filelock import FileLock, Timeout

from ..model import ObservationResult, validate_observation
from .store import AppendLog, StorageFull
from .wire import UploadEnvelope, dumps, loads, observation_to_wire

log = logging.getLogger(__name__)

__all__ = ["DurableQueue", "Receipt", "QueueLocked", "StorageFull", "QueueEntry"]


class QueueLocked(RuntimeError):
    pass


@dataclass(frozen=True)
class Receipt:
    device_id: str
    first_sequence: int
    last_sequence: int
    position: int
    duplicate: bool = False


@dataclass
class QueueEntry:
    envelope: UploadEnvelope
    state: str = "pending"          # pending | in_flight | acked | parked
    attempt_count: int = 0
    next_attempt_at: float = 0.0


@dataclass
class _Device:
    next_seq: int = 1
    pending: "OrderedDict[int, dict]" = field(default_factory=OrderedDict)  # seq -> wire obs, not yet enveloped
    entries: list = field(default_factory=list)                            # open QueueEntry, oldest first
    acked_upto: int = 0
    acked_count: int = 0
    parked: list = field(default_factory=list)
    last_digest: Optional[str] = None
    file_digests: set = field(default_factory=set)
    last_commit: float = 0.0
    last_delivery: Optional[float] = None


class DurableQueue:
    def __init__(self, directory: os.PathLike, gateway_id: str, fsync: bool = True,
                 batch_max: int = 100, compact_threshold: int = 20000, lock: bool = True):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.gateway_id = gateway_id
        self.batch_max = batch_max
        self.compact_threshold = compact_threshold
        self._lock = threading.RLock()
        self._file_lock = None
        if lock:
            self._file_lock = FileLock(str(self.dir / "queue.lock"))
            try:
                self._file_lock.acquire(timeout=0)
            except Timeout:
                raise QueueLocked(f"queue {self.dir} is in use by another process") from None
        self._log = AppendLog(self.dir / "queue.log", fsync=fsync)
        self._devices: dict[str, _Device] = {}
        self._dead_records = 0
        self._dead_letters: "OrderedDict[int, dict]" = OrderedDict()
        self._next_dead_id = 1
        self.listeners: list[Callable[[str], None]] = []
        self._recover()

    # ------------------------------------------------------------ recovery
    def _dev(self, device_id: str) -> _Device:
        d = self._devices.get(device_id)
        if d is None:
            d = self._devices[device_id] = _Device()
        return d

    def _recover(self) -> None:
        for payload in self._log.recovered():
            self._apply(loads(payload), replay=True)
        if self._log.truncated_bytes:
            log.warning("recovered queue after truncating a torn tail")

    def _apply(self, rec: dict, replay: bool = False) -> None:
        t = rec["t"]
        if t == "drain":
            for k in [k for k in self._dead_letters if k <= rec["upto"]]:
                del self._dead_letters[k]
            return
        for dl in rec.get("dead", ()):
            self._dead_letters[dl["id"]] = dl
            self._next_dead_id = max(self._next_dead_id, dl["id"] + 1)
        if t == "dead":
            return
        dev = self._dev(rec["dev"])
        if t == "obs":
            for o in rec["obs"]:
                dev.pending[o["sequence"]] = o
            dev.next_seq = max(dev.next_seq, rec["obs"][-1]["sequence"] + 1) if rec["obs"] else dev.next_seq
            if rec.get("file"):
                dev.file_digests.add(rec["digest"])
            elif rec.get("digest"):
                dev.last_digest = rec["digest"]
        elif t == "env":
            obs = [dev.pending.pop(s) for s in range(rec["first"], rec["last"] + 1)]
            dev.entries.append(QueueEntry(UploadEnvelope(self.gateway_id, rec["dev"], tuple(obs))))
        elif t in ("ack", "park"):
            entry = next(e for e in dev.entries if e.envelope.first == rec["first"])
            dev.entries.remove(entry)
            self._dead_records += 1
            if t == "ack":
                entry.state = "acked"
                dev.acked_upto = max(dev.acked_upto, rec["last"])
                dev.acked_count += len(entry.envelope.observations)
            else:
                entry.state = "parked"
                dev.parked.append((entry.envelope, rec.get("reason", "")))
        elif t == "mark":
            dev.next_seq = max(dev.next_seq, rec["next_seq"])
            dev.last_digest = rec.get("last_digest")
            dev.file_digests.update(rec.get("file_digests", []))
            dev.acked_upto = rec.get("acked_upto", 0)
            dev.acked_count = rec.get("acked_count", 0)
            for env_obs, reason in rec.get("parked", []):
                dev.parked.append((UploadEnvelope(self.gateway_id, rec["dev"], tuple(env_obs)), reason))
        else:
            raise ValueError(f"unknown queue record {t!r}")

    def _write(self, rec: dict) -> int:
        rec.setdefault("dev", "")
        pos = self._log.append(dumps(rec).encode())
        self._apply(rec)
        return pos

    # ------------------------------------------------------------ producers
    def next_sequence(self, device_id: str) -> int:
        with self._lock:
            return self._dev(device_id).next_seq

    def is_duplicate(self, device_id: str, digest: str, first_in_session: bool = True) -> bool:
        """A session's first message equal to the last committed one is a retransmission."""
        with self._lock:
            dev = self._devices.get(device_id)
            return bool(dev and first_in_session and dev.last_digest == digest)

    def file_seen(self, device_id: str, digest: str) -> bool:
        with self._lock:
            dev = self._devices.get(device_id)
            return bool(dev and digest in dev.file_digests)

    def commit(self, device_id: str, build: Callable[[int], list[ObservationResult]],
               digest: Optional[str] = None, file: bool = False,
               dead: Optional[list[dict]] = None) -> Optional[Receipt]:
        """Assign sequences, validate and durably append one batch.

        ``build`` receives the first free sequence number and returns the
        observations. ``dead`` are dead-letter dicts stored in the same
        record. Returns None when there was nothing to write.
        """
        with self._lock:
            dev = self._dev(device_id)
            first = dev.next_seq
            observations = build(first)
            if not observations and not digest and not dead:
                return None
            for i, obs in enumerate(observations):
                if obs.device_id != device_id or obs.sequence != first + i:
                    raise ValueError(f"observation {obs.sequence} out of order for {device_id}")
                problems = validate_observation(obs)
                if problems:
                    raise ValueError(f"invalid observation: {'; '.join(problems)}")
            rec = {"t": "obs", "dev": device_id, "digest": digest, "file": file,
                   "obs": [observation_to_wire(o) for o in observations]}
            if dead:
                rec["dead"] = [dict(d, id=self._next_dead_id + i) for i, d in enumerate(dead)]
            pos = self._write(rec)
            dev.last_commit = time.monotonic()
        self._notify(device_id)
        last = first + len(observations) - 1
        return Receipt(device_id, first, last, pos)

    def enqueue(self, obs: ObservationResult) -> Receipt:
        """Append a single observation whose sequence is the device's next one."""
        with self._lock:
            want = self._dev(obs.device_id).next_seq
            if obs.sequence != want:
                raise ValueError(f"sequence {obs.sequence} is not the next one ({want}) for {obs.device_id}")
            return self.commit(obs.device_id, lambda first: [obs])  # type: ignore[return-value]

    def _notify(self, device_id: str) -> None:
        for fn in list(self.listeners):
            try:
                fn(device_id)
            except Exception:  # a broken listener must not fail a commit
                log.exception("queue listener failed")

    # ------------------------------------------------------------ dead letters
    def add_dead_letters(self, device_id: str, dead: list[dict]) -> None:
        with self._lock:
            self._write({"t": "dead", "dev": device_id,
                         "dead": [dict(d, id=self._next_dead_id + i) for i, d in enumerate(dead)]})

    def dead_letters(self, device_id: Optional[str] = None) -> list[dict]:
        with self._lock:
            return [d for d in self._dead_letters.values() if device_id is None or d["device_id"] == device_id]

    def drain_dead_letters(self, upto: int) -> None:
        """Forget dead letters with id <= ``upto`` (after they were exported)."""
        with self._lock:
            self._write({"t": "drain", "upto": upto})

    # ------------------------------------------------------------ consumer
    def devices(self) -> list[str]:
        with self._lock:
            return list(self._devices)

    def has_work(self, device_id: str) -> bool:
        with self._lock:
            dev = self._devices.get(device_id)
            return bool(dev and (dev.entries or dev.pending))

    def flush_deadline(self, device_id: str, idle: float) -> Optional[float]:
        with self._lock:
            dev = self._devices.get(device_id)
            if not dev or not dev.pending:
                return None
            return dev.last_commit + idle

    def next_entry(self, device_id: str, idle: float = 2.0, force: bool = False) -> Optional[QueueEntry]:
        """The oldest open envelope, forming a new one when a batch is due."""
        with self._lock:
            dev = self._devices.get(device_id)
            if dev is None:
                return None
            if dev.entries:
                return dev.entries[0]
            if not dev.pending:
                return None
            due = force or len(dev.pending) >= self.batch_max or time.monotonic() - dev.last_commit >= idle
            if not due:
                return None
            seqs = list(dev.pending)[: self.batch_max]
            self._write({"t": "env", "dev": device_id, "first": seqs[0], "last": seqs[-1]})
            return dev.entries[0]

    def mark_acked(self, entry: QueueEntry, accepted: int = 0, duplicates: int = 0) -> None:
        env = entry.envelope
        with self._lock:
            self._write({"t": "ack", "dev": env.device_id, "first": env.first, "last": env.last,
                         "accepted": accepted, "duplicates": duplicates})
            self._dev(env.device_id).last_delivery = time.time()
            self._maybe_compact()

    def mark_parked(self, entry: QueueEntry, reason: str) -> None:
        env = entry.envelope
        with self._lock:
            self._write({"t": "park", "dev": env.device_id, "first": env.first, "last": env.last,
                         "reason": reason})

    # ------------------------------------------------------------ introspection
    def depth(self, device_id: str) -> int:
        with self._lock:
            dev = self._devices.get(device_id)
            if not dev:
                return 0
            return len(dev.pending) + sum(len(e.envelope.observations) for e in dev.entries)

    def stats(self, device_id: str) -> dict:
        with self._lock:
            dev = self._devices.get(device_id) or _Device()
            return {
                "queue_depth": len(dev.pending) + sum(len(e.envelope.observations) for e in dev.entries),
                "acked": dev.acked_count,
                "parked": sum(len(e.observations) for e, _ in dev.parked),
                "last_delivery": dev.last_delivery,
                "next_sequence": dev.next_seq,
            }

    def parked(self, device_id: str) -> list:
        with self._lock:
            dev = self._devices.get(device_id)
            return list(dev.parked) if dev else []

    # ------------------------------------------------------------ compaction
    def _maybe_compact(self) -> None:
        if self._dead_records >= self.compact_threshold // self.batch_max or \
                self._log.size > 64 * 1024 * 1024:
            self.compact()

    def compact(self) -> None:
        """Rewrite the log keeping only what is still needed."""
        with self._lock:
            payloads = []
            for dev_id, dev in self._devices.items():
                payloads.append(dumps({
                    "t": "mark", "dev": dev_id, "next_seq": dev.next_seq, "last_digest": dev.last_digest,
                    "file_digests": sorted(dev.file_digests), "acked_upto": dev.acked_upto,
                    "acked_count": dev.acked_count,
                    "parked": [[list(e.observations), r] for e, r in dev.parked],
                }).encode())
                for entry in dev.entries:
                    obs = list(entry.envelope.observations)
                    payloads.append(dumps({"t": "obs", "dev": dev_id, "digest": None, "obs": obs}).encode())
                    payloads.append(dumps({"t": "env", "dev": dev_id, "first": entry.envelope.first,
                                           "last": entry.envelope.last}).encode())
                if dev.pending:
                    payloads.append(dumps({"t": "obs", "dev": dev_id, "digest": None,
                                           "obs": list(dev.pending.values())}).encode())
            if self._dead_letters:
                dl = list(self._dead_letters.values())
                payloads.append(dumps({"t": "dead", "dev": dl[0]["device_id"], "dead": dl}).encode())
            self._log.rewrite(payloads)
            self._dead_records = 0

    def close(self) -> None:
        self._log.close()
        if self._file_lock is not None:
            self._file_lock.release()
