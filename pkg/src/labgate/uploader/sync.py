"""Delivery loop: one sequential worker per device, oldest envelope first."""
from __future__ import annotations

import asyncio
import logging
import random
import time
from dataclasses import dataclass
from typing import Optional

from .client import HisClient, HisError
from .queue import DurableQueue

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Backoff:
    base: float = 1.0
    factor: float = 2.0
    cap: float = 60.0

    def ceiling(self, attempt: int) -> float:
        """Upper bound of the delay after ``attempt`` consecutive failures (attempt >= 1)."""
        return min(self.cap, self.base * self.factor ** (attempt - 1))

    def delay(self, attempt: int, rng: random.Random) -> float:
        # full jitter
        return rng.uniform(0, self.ceiling(attempt))


@dataclass
class SyncStats:
    sent: int = 0
    failures: int = 0
    parked: int = 0
    duplicates: int = 0
    last_error: Optional[str] = None


class SyncLoop:
    def __init__(self, queue: DurableQueue, client: HisClient, flush_idle: float = 2.0,
                 backoff: Backoff = Backoff(), seed: Optional[int] = None):
        self.queue = queue
        self.client = client
        self.flush_idle = flush_idle
        self.backoff = backoff
        self.rng = random.Random(seed)
        self.stats: dict[str, SyncStats] = {}
        self._wake: dict[str, asyncio.Event] = {}
        self._tasks: dict[str, asyncio.Task] = {}
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._stopping = False
        self._draining = False

    # listeners are called from whatever thread committed
    def _on_commit(self, device_id: str) -> None:
        loop = self._loop
        if loop is None or loop.is_closed():
            return
        try:
            running = asyncio.get_running_loop()
        except RuntimeError:
            running = None
        if running is loop:
            self._kick(device_id)
        else:
            loop.call_soon_threadsafe(self._kick, device_id)

    def _kick(self, device_id: str) -> None:
        if self._stopping:
            return
        task = self._tasks.get(device_id)
        if task is None or task.done():
            self._wake.setdefault(device_id, asyncio.Event())
            self.stats.setdefault(device_id, SyncStats())
            self._tasks[device_id] = asyncio.get_running_loop().create_task(
                self._worker(device_id), name=f"sync-{device_id}")
        self._wake[device_id].set()

    async def start(self) -> None:
        self._loop = asyncio.get_running_loop()
        self.queue.listeners.append(self._on_commit)
        for dev in self.queue.devices():
            if self.queue.has_work(dev):
                self._kick(dev)

    async def _worker(self, device_id: str) -> None:
        wake = self._wake[device_id]
        stats = self.stats[device_id]
        attempt = 0
        while not self._stopping:
            entry = self.queue.next_entry(device_id, self.flush_idle, force=self._draining)
            if entry is None:
                deadline = self.queue.flush_deadline(device_id, self.flush_idle)
                wake.clear()
                if self._draining and not self.queue.has_work(device_id):
                    return
                timeout = None if deadline is None else max(0.0, deadline - time.monotonic())
                try:
                    await asyncio.wait_for(wake.wait(), timeout)
                except asyncio.TimeoutError:
                    pass
                continue
            entry.state = "in_flight"
            entry.attempt_count += 1
            try:
                ack = await self.client.post_results(entry.envelope)
            except HisError as exc:
                entry.state = "pending"
                stats.last_error = str(exc)
                if not exc.retryable:
                    log.error("HIS rejected %s, parking it: %s", entry.envelope.idempotency_key, exc)
                    self.queue.mark_parked(entry, str(exc))
                    stats.parked += len(entry.envelope.observations)
                    attempt = 0
                    continue
                attempt += 1
                stats.failures += 1
                delay = self.backoff.delay(attempt, self.rng)
                entry.next_attempt_at = time.monotonic() + delay
                log.info("upload of %s failed (%s), retry in %.2fs", entry.envelope.idempotency_key, exc, delay)
                if self._draining:
                    return
                await asyncio.sleep(delay)
                continue
            attempt = 0
            self.queue.mark_acked(entry, ack.accepted, ack.duplicates)
            stats.sent += len(entry.envelope.observations)
            stats.duplicates += ack.duplicates

    async def drain(self, timeout: float = 10.0) -> bool:
        """Force-flush everything; True when all queues emptied within ``timeout``."""
        self._draining = True
        for dev in self.queue.devices():
            if self.queue.has_work(dev):
                self._kick(dev)
        tasks = list(self._tasks.values())
        for dev in self._wake:
            self._wake[dev].set()
        if tasks:
            await asyncio.wait(tasks, timeout=timeout)
        return not any(self.queue.has_work(d) for d in self.queue.devices())

    async def stop(self) -> None:
        self._stopping = True
        if self._on_commit in self.queue.listeners:
            self.queue.listeners.remove(self._on_commit)
        for t in self._tasks.values():
            t.cancel()
        await asyncio.gather(*self._tasks.values(), return_exceptions=True)
        self._tasks.clear()
