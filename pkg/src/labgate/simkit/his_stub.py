"""Mock cloud HIS: results ledger with idempotent inserts, worklist table, faults."""
from __future__ import annotations

import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Iterable, Optional
from urllib.parse import unquote

log = logging.getLogger(__name__)

OBSERVATION_KEYS = frozenset((
    "device_id", "sample_id", "test_id", "machine_test_code", "value", "unit", "ref_low", "ref_high",
    "abnormal_flag", "result_status", "observed_at", "received_at", "operator_id", "sequence",
))


@dataclass(frozen=True)
class FaultProfile:
    """Server-side faults.

    drop_rate           request discarded before the ledger, no response
    ack_loss_rate       request applied to the ledger, response discarded
    duplicate_ack_rate  request applied twice (a replayed delivery), one response
    delay_ms            added to every request
    reject_devices      envelopes for these devices get 400
    """

    drop_rate: float = 0.0
    ack_loss_rate: float = 0.0
    duplicate_ack_rate: float = 0.0
    delay_ms: int = 0
    reject_devices: frozenset = frozenset()


class BadEnvelope(ValueError):
    pass


@dataclass
class HisLedger:
    entries: dict = field(default_factory=dict)        # (gateway, device, seq) -> observation
    order: list = field(default_factory=list)          # keys in insertion order
    duplicates: int = 0
    envelopes: int = 0
    worklist: dict = field(default_factory=dict)       # sample_id -> order dict

    def __post_init__(self):
        self._lock = threading.Lock()

    def insert(self, body: dict) -> tuple[int, int]:
        gw, obs = _validate(body)
        accepted = dup = 0
        with self._lock:
            self.envelopes += 1
            for o in obs:
                key = (gw, o["device_id"], o["sequence"])
                if key in self.entries:
                    dup += 1
                    continue
                self.entries[key] = o
                self.order.append(key)
                accepted += 1
            self.duplicates += dup
        return accepted, dup

    def snapshot(self) -> list[dict]:
        with self._lock:
            return [self.entries[k] for k in self.order]

    def count(self) -> int:
        with self._lock:
            return len(self.entries)

    def by_device(self) -> dict[str, list[dict]]:
        out: dict[str, list[dict]] = {}
        for o in self.snapshot():
            out.setdefault(o["device_id"], []).append(o)
        return out

    def to_json(self) -> str:
        from ..uploader.wire import dumps
        return dumps({"duplicates": self.duplicates, "observations": self.snapshot()})


def _validate(body: dict) -> tuple[str, list[dict]]:
    if not isinstance(body, dict) or body.get("schema_version") != 1:
        raise BadEnvelope("schema_version must be 1")
    gw, key, obs = body.get("gateway_id"), body.get("idempotency_key"), body.get("observations")
    if not isinstance(gw, str) or not isinstance(key, str) or not isinstance(obs, list) or not obs:
        raise BadEnvelope("gateway_id, idempotency_key and observations are required")
    for o in obs:
        if not isinstance(o, dict) or set(o) != OBSERVATION_KEYS:
            raise BadEnvelope("observation fields do not match the schema")
        if not isinstance(o["sequence"], int):
            raise BadEnvelope("sequence must be an integer")
    dev = obs[0]["device_id"]
    seqs = [o["sequence"] for o in obs]
    if any(o["device_id"] != dev for o in obs) or seqs != list(range(seqs[0], seqs[0] + len(seqs))):
        raise BadEnvelope("observations must be one device with contiguous sequences")
    if key != f"{gw}:{dev}:{seqs[0]}-{seqs[-1]}":
        raise BadEnvelope("idempotency_key does not match content")
    return gw, obs


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, fmt, *args):
        log.debug("his: " + fmt, *args)

    def _send(self, code: int, body: Optional[dict]) -> None:
        data = json.dumps(body).encode() if body is not None else b""
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        stub: HisStub = self.server.stub
        stub._delay()
        prefix = "/api/v1/worklist/"
        if not self.path.startswith(prefix):
            self._send(404, {"error": "not_found"})
            return
        sample_id = unquote(self.path[len(prefix):])
        order = stub.ledger.worklist.get(sample_id)
        if order is None:
            self._send(404, {"error": "not_found"})
        else:
            self._send(200, order)

    def do_POST(self):
        stub: HisStub = self.server.stub
        if self.path != "/api/v1/results":
            self._send(404, {"error": "not_found"})
            return
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        stub._delay()
        stub.requests += 1
        if stub._roll("drop_rate"):
            stub.dropped += 1
            self.close_connection = True
            return
        try:
            body = json.loads(raw, parse_float=Decimal)
            if body.get("observations") and body["observations"][0].get("device_id") in stub.faults.reject_devices:
                raise BadEnvelope("device rejected by fault profile")
            accepted, dup = stub.ledger.insert(body)
        except (ValueError, AttributeError, TypeError, KeyError, BadEnvelope) as exc:
            stub.rejected += 1
            self._send(400, {"error": "bad_envelope", "detail": str(exc)})
            return
        if stub._roll("duplicate_ack_rate"):
            stub.ledger.insert(body)
        if stub._roll("ack_loss_rate"):
            stub.acks_lost += 1
            self.close_connection = True
            return
        self._send(200, {"accepted": accepted, "duplicates": dup})


class HisStub:
    """Threaded HTTP server around a :class:`HisLedger`."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, worklist: Iterable[dict] = (),
                 faults: FaultProfile = FaultProfile(), seed: int = 0):
        self.ledger = HisLedger()
        for order in worklist:
            self.seed_worklist(order)
        self.faults = faults
        self._rng = random.Random(seed)
        self._rng_lock = threading.Lock()
        self.requests = self.dropped = self.acks_lost = self.rejected = 0
        self.httpd = ThreadingHTTPServer((host, port), _Handler)
        self.httpd.daemon_threads = True
        self.httpd.stub = self
        self._thread: Optional[threading.Thread] = None

    def seed_worklist(self, order: dict) -> None:
        self.ledger.worklist[order["sample_id"]] = {
            "sample_id": order["sample_id"], "patient_ref": order.get("patient_ref"),
            "tests": list(order["tests"]), "priority": order.get("priority", "routine")}

    def _roll(self, name: str) -> bool:
        rate = getattr(self.faults, name)
        if rate <= 0:
            return False
        with self._rng_lock:
            return self._rng.random() < rate

    def _delay(self) -> None:
        if self.faults.delay_ms:
            time.sleep(self.faults.delay_ms / 1000.0)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "HisStub":
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="his-stub", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> HisLedger:
        self.httpd.shutdown()
        self.httpd.server_close()
        return self.ledger

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def run_his_stub(host: str = "127.0.0.1", port: int = 0, worklist: Iterable[dict] = (),
                 faults: FaultProfile = FaultProfile(), seed: int = 0) -> HisStub:
    """Start a stub and return it; the ledger stays readable after ``stop()``."""
    return HisStub(host, port, worklist, faults, seed).start()
