"""The gateway process: listeners, sessions, uploader and control endpoint."""
from __future__ import annotations

import asyncio
import json
import logging
import os
import signal
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from ..config import GatewayConfig
from ..framing import FramingError, ingest_file
from ..registry import Registry, RegistryError, RegistryStore
from ..uploader.client import HisClient
from ..uploader.queue import DurableQueue
from ..uploader.sync import Backoff, SyncLoop
from .pipeline import Pipeline
from .sessions import SESSION_TYPES, Counters, Session, SessionContext

log = logging.getLogger(__name__)


@dataclass
class Listener:
    device_id: str
    endpoint: str
    state: str = "starting"         # listening | bind_failure | disabled | stopped
    error: Optional[str] = None
    server: Optional[asyncio.AbstractServer] = None
    refused: int = 0


@dataclass
class IngestResult:
    device_id: str
    accepted: int = 0
    rejected: list = field(default_factory=list)   # [{"line": n, "reason": ...}]
    dead_lettered: int = 0
    total_lines: int = 0
    duplicate: bool = False

    def to_dict(self) -> dict:
        return dict(vars(self))


def ingest_into(registry: Registry, pipeline: Pipeline, device_id: str, content: bytes,
                operator_id: str) -> IngestResult:
    """Parse a result file for ``device_id`` and commit its results.

    Raises RegistryError (unknown_device, unknown_operator, no_file_format)
    or FramingError (empty_file) before anything is committed.
    """
    registry.device(device_id)
    registry.user(operator_id)
    fmt = registry.resolve_file_format(device_id)
    report = ingest_file(content, fmt.spec.file, device_id, operator_id)
    out = IngestResult(device_id, total_lines=report.total_lines,
                       rejected=[{"line": r.line, "reason": r.reason, "text": r.text} for r in report.rejected])
    outcome = pipeline.process(registry, device_id, report.results, content, file=True,
                               payload_digest=report.digest)
    out.duplicate = outcome.duplicate
    out.accepted = outcome.emitted
    out.dead_lettered = outcome.dead_lettered
    return out


def export_dead_letters(queue: DurableQueue, path: os.PathLike) -> int:
    """Write pending dead letters as JSON lines, then drain them. Returns the count."""
    letters = queue.dead_letters()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        for d in letters:
            fh.write(json.dumps(d, sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    if letters:
        queue.drain_dead_letters(max(d["id"] for d in letters))
    return len(letters)


class GatewayService:
    def __init__(self, config: GatewayConfig, registry: Optional[RegistryStore] = None):
        self.config = config
        self.registry = registry or RegistryStore(config.registry)
        self.queue: Optional[DurableQueue] = None
        self.listeners: dict[str, Listener] = {}
        self.sessions: dict[str, Session] = {}
        self.totals: dict[str, Counters] = {}
        self.started_at = time.time()
        self._session_tasks: set = set()
        self.his: Optional[HisClient] = None
        self.sync: Optional[SyncLoop] = None
        self.control = None
        self.loop: Optional[asyncio.AbstractEventLoop] = None
        self.stopped = asyncio.Event()

    # ------------------------------------------------------------ lifecycle
    async def start(self, control: bool = True) -> None:
        cfg = self.config
        self.loop = asyncio.get_running_loop()
        # recovery happens here, before any listener accepts a connection
        self.queue = DurableQueue(cfg.queue_dir, cfg.gateway_id, fsync=cfg.uploader.fsync,
                                  batch_max=cfg.uploader.batch_max)
        self.pipeline = Pipeline(cfg.gateway_id, self.queue)
        if cfg.his.base_url:
            self.his = HisClient(cfg.his.base_url, timeout=cfg.his.timeout)
            backoff = Backoff(cfg.uploader.backoff_base, cfg.uploader.backoff_factor, cfg.uploader.backoff_cap)
            self.sync = SyncLoop(self.queue, self.his, cfg.uploader.flush_idle, backoff)
            await self.sync.start()
        else:
            log.warning("no HIS configured; results stay queued")
        self.ctx = SessionContext(cfg.gateway_id, self.pipeline, self.his, cfg.timers, cfg.his.worklist_budget)
        for device in self.registry.snapshot().devices.values():
            if device.protocol == "file_only" or not device.listen_endpoint:
                continue
            lst = self.listeners[device.device_id] = Listener(device.device_id, device.listen_endpoint)
            if not device.enabled:
                lst.state = "disabled"
                continue
            host, port = device.host_port
            try:
                lst.server = await asyncio.start_server(
                    lambda r, w, dev=device.device_id: self._on_connect(dev, r, w), host, port)
                lst.state = "listening"
            except OSError as exc:
                lst.state, lst.error = "bind_failure", str(exc)
                log.error("%s: cannot listen on %s: %s", device.device_id, device.listen_endpoint, exc)
        if control:
            from ..control import ControlServer
            self.control = ControlServer(self, *cfg.control_host_port)
            self.control.start()
        log.info("gateway %s up: %d listeners", cfg.gateway_id,
                 sum(1 for x in self.listeners.values() if x.state == "listening"))

    async def stop(self) -> None:
        for lst in self.listeners.values():
            if lst.server is not None:
                lst.server.close()
                lst.state = "stopped"
        # let active transfers finish, then cut them
        if self._session_tasks:
            await asyncio.wait(list(self._session_tasks), timeout=self.config.shutdown_grace)
        for t in list(self._session_tasks):
            t.cancel()
        await asyncio.gather(*self._session_tasks, return_exceptions=True)
        if self.sync is not None:
            drained = await self.sync.drain(self.config.uploader.drain_timeout)
            if not drained:
                log.warning("shutdown with undelivered results; they stay queued")
            await self.sync.stop()
        if self.his is not None:
            await self.his.close()
        if self.control is not None:
            self.control.stop()
        if self.queue is not None:
            self.queue.close()
        self.stopped.set()

    # ------------------------------------------------------------ sessions
    def counters(self, device_id: str) -> Counters:
        c = self.totals.get(device_id)
        if c is None:
            c = self.totals[device_id] = Counters()
        return c

    async def _on_connect(self, device_id: str, reader, writer) -> None:
        lst = self.listeners[device_id]
        if device_id in self.sessions:
            lst.refused += 1
            log.warning("%s: refusing second connection from %s", device_id, writer.get_extra_info("peername"))
            writer.close()
            return
        registry = self.registry.snapshot()
        try:
            device = registry.device(device_id)
            cls = SESSION_TYPES[device.protocol]
            session = cls(self.ctx, registry, device, reader, writer, self.counters(device_id))
        except (RegistryError, KeyError) as exc:
            lst.refused += 1
            log.error("%s: cannot start session: %s", device_id, exc)
            writer.close()
            return
        if not device.enabled:
            lst.refused += 1
            writer.close()
            return
        self.sessions[device_id] = session
        task = asyncio.current_task()
        self._session_tasks.add(task)
        try:
            await session.run()
        finally:
            self._session_tasks.discard(task)
            self.sessions.pop(device_id, None)

    # ------------------------------------------------------------ operations
    def status(self) -> dict:
        reg = self.registry.snapshot()
        devices = {}
        for dev_id in sorted(set(reg.devices) | set(self.totals)):
            lst = self.listeners.get(dev_id)
            qs = self.queue.stats(dev_id) if self.queue else {}
            last = qs.get("last_delivery")
            devices[dev_id] = {
                "listener": lst.state if lst else ("file_only" if dev_id in reg.devices else "unknown"),
                "listener_error": lst.error if lst else None,
                "refused_connections": lst.refused if lst else 0,
                "session_active": dev_id in self.sessions,
                "counters": self.counters(dev_id).to_dict(),
                "queue_depth": qs.get("queue_depth", 0),
                "delivered": qs.get("acked", 0),
                "parked": qs.get("parked", 0),
                "last_delivery": datetime.fromtimestamp(last, timezone.utc).isoformat() if last else None,
                "dead_letters": len(self.queue.dead_letters(dev_id)) if self.queue else 0,
            }
        return {
            "gateway_id": self.config.gateway_id,
            "uptime_s": round(time.time() - self.started_at, 3),
            "listeners_live": sum(1 for x in self.listeners.values() if x.state == "listening"),
            "bind_failures": sum(1 for x in self.listeners.values() if x.state == "bind_failure"),
            "devices": devices,
        }

    def ingest_file(self, device_id: str, content: bytes, operator_id: str) -> IngestResult:
        out = ingest_into(self.registry.snapshot(), self.pipeline, device_id, content, operator_id)
        c = self.counters(device_id)
        c.messages += 1
        if out.duplicate:
            c.duplicates += 1
        c.results_emitted += out.accepted
        c.dead_lettered += out.dead_lettered
        return out

    def export_deadletters(self, path: os.PathLike) -> int:
        return export_dead_letters(self.queue, path)


async def serve(config: GatewayConfig, stop: Optional[asyncio.Event] = None) -> GatewayService:
    service = GatewayService(config)
    await service.start()
    stop = stop or asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGTERM, signal.SIGINT):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError):
            pass
    await stop.wait()
    log.info("shutting down")
    await service.stop()
    return service


def run_gateway(config: GatewayConfig) -> None:
    """Run until SIGTERM or SIGINT."""
    asyncio.run(serve(config))
