"""Run a gateway (in a thread or a child process) against a simulated fleet."""
from __future__ import annotations

import asyncio
import json
import logging
import os
import signal
import socket
import subprocess
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from ..astm.transport import Timers
from ..config import GatewayConfig, HisSettings, UploaderSettings
from ..control import ControlClient
from ..registry import RegistryStore
from .analyzer import RunResult, SimFaults, run_analyzer
from .fleet import FleetFixture

log = logging.getLogger(__name__)


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def free_port_block(n: int, host: str = "127.0.0.1", start: int = 20000, stop: int = 60000) -> int:
    """First port p such that p..p+n-1 can all be bound right now."""
    p = start + (os.getpid() * 37) % 5000
    while p + n < stop:
        socks = []
        try:
            for i in range(n):
                s = socket.socket()
                s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                s.bind((host, p + i))
                socks.append(s)
            return p
        except OSError:
            p += n + 1
        finally:
            for s in socks:
                s.close()
    raise RuntimeError("no free port block")


def make_config(workdir: Path, registry_path: Path, his_url: Optional[str], gateway_id: str = "GW-TEST",
                flush_idle: float = 0.2, backoff_cap: float = 2.0, backoff_base: float = 0.05,
                timers: Timers = Timers(), fsync: bool = True) -> GatewayConfig:
    return GatewayConfig(
        gateway_id=gateway_id, registry=registry_path, data_dir=workdir / "data",
        control_endpoint=f"127.0.0.1:{free_port()}",
        his=HisSettings(his_url, timeout=5.0, worklist_budget=5.0),
        uploader=UploaderSettings(flush_idle=flush_idle, backoff_base=backoff_base, backoff_cap=backoff_cap,
                                  fsync=fsync, drain_timeout=10.0),
        timers=timers, audit_log=workdir / "audit.log", shutdown_grace=2.0)


def write_config_file(cfg: GatewayConfig, path: Path) -> Path:
    data = cfg.to_dict()
    path.write_text(json.dumps(data, indent=2))
    return path


class GatewayThread:
    """A :class:`GatewayService` on its own event loop in a daemon thread."""

    def __init__(self, config: GatewayConfig, control: bool = True):
        from ..gateway.service import GatewayService

        self.config = config
        self.service = GatewayService(config)
        self._control = control
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, name="gateway", daemon=True)

    def start(self) -> "GatewayThread":
        self._thread.start()
        asyncio.run_coroutine_threadsafe(self.service.start(self._control), self._loop).result(30)
        return self

    def call(self, fn, *args, timeout: float = 30.0):
        async def _run():
            return fn(*args)
        return asyncio.run_coroutine_threadsafe(_run(), self._loop).result(timeout)

    def status(self) -> dict:
        return self.call(self.service.status)

    def stop(self) -> None:
        if not self._thread.is_alive():
            return
        asyncio.run_coroutine_threadsafe(self.service.stop(), self._loop).result(120)
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join(10)
        self._loop.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class GatewayProcess:
    """``python -m labgate.cli run`` as a child process, for kill tests."""

    def __init__(self, config_path: Path, log_path: Optional[Path] = None):
        self.config_path = Path(config_path)
        self.log_path = log_path
        self.proc: Optional[subprocess.Popen] = None
        self.endpoint = json.loads(self.config_path.read_text())["control_endpoint"]

    def start(self, wait: float = 30.0) -> "GatewayProcess":
        out = open(self.log_path, "ab") if self.log_path else subprocess.DEVNULL
        self.proc = subprocess.Popen([sys.executable, "-m", "labgate.cli", "--config", str(self.config_path), "run"],
                                     stdout=out, stderr=subprocess.STDOUT)
        if out is not subprocess.DEVNULL:
            out.close()
        client = ControlClient(self.endpoint, timeout=5)
        end = time.monotonic() + wait
        while time.monotonic() < end:
            if self.proc.poll() is not None:
                raise RuntimeError(f"gateway exited with {self.proc.returncode}")
            try:
                client.status()
                return self
            except Exception:
                time.sleep(0.05)
        raise RuntimeError("gateway did not come up")

    def kill(self) -> None:
        if self.proc and self.proc.poll() is None:
            self.proc.send_signal(signal.SIGKILL)
            self.proc.wait(10)

    def terminate(self, timeout: float = 60.0) -> int:
        if self.proc and self.proc.poll() is None:
            self.proc.send_signal(signal.SIGTERM)
            try:
                return self.proc.wait(timeout)
            except subprocess.TimeoutExpired:
                self.kill()
        return self.proc.returncode if self.proc else 0

    def alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None

    def status(self) -> dict:
        return ControlClient(self.endpoint, timeout=10).status()


@dataclass
class FleetRun:
    results: dict = field(default_factory=dict)       # device_id -> RunResult
    errors: dict = field(default_factory=dict)
    elapsed: float = 0.0


def run_fleet(fixture: FleetFixture, control_endpoint: str, seed: int = 0, faults: SimFaults = SimFaults(),
              connect_deadline: float = 60.0, max_workers: Optional[int] = None) -> FleetRun:
    """Drive every device plan concurrently; file devices ingest through the control endpoint."""
    client = ControlClient(control_endpoint, timeout=60)
    run = FleetRun()
    t0 = time.monotonic()

    def one(i: int, plan) -> RunResult:
        ingest = None
        if plan.sim.kind == "file":
            def ingest(content: bytes, dev=plan.profile.device_id, op=plan.sim.operator_id) -> dict:
                return client.ingest(dev, content, op)
        target = plan.profile.listen_endpoint or ""
        return run_analyzer(plan.sim, target, plan.script, seed * 1000 + i, faults, ingest,
                            connect_deadline=connect_deadline, raise_on_error=False)

    with ThreadPoolExecutor(max_workers or max(1, len(fixture.devices))) as pool:
        futs = {p.profile.device_id: pool.submit(one, i, p) for i, p in enumerate(fixture.devices)}
        for dev, fut in futs.items():
            res = fut.result()
            run.results[dev] = res
            if res.error:
                run.errors[dev] = res.error
    run.elapsed = time.monotonic() - t0
    return run


def place_fleet(fixture: FleetFixture, base_port: int) -> FleetFixture:
    """Rebind a fixture's endpoints to base_port + i (fixtures are generated with nominal ports)."""
    devices = []
    for i, plan in enumerate(fixture.devices):
        if plan.profile.listen_endpoint:
            host = plan.profile.listen_endpoint.rpartition(":")[0]
            plan = replace(plan, profile=replace(plan.profile, listen_endpoint=f"{host}:{base_port + i}"))
        devices.append(plan)
    from ..registry import Registry
    reg = Registry([p.profile for p in devices], fixture.registry.mappings.values(), fixture.registry.users.values())
    return replace(fixture, registry=reg, devices=devices)


def save_registry(fixture: FleetFixture, path: Path) -> RegistryStore:
    path.write_text(json.dumps(fixture.registry.to_dict(), indent=2) + "\n")
    return RegistryStore(path)
