"""HTTP client for the HIS results and worklist endpoints."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional
from urllib.parse import quote

import httpx

from ..model import WorklistOrder
from .wire import UploadEnvelope, loads, worklist_from_wire

log = logging.getLogger(__name__)

WORKLIST_BUDGET = 5.0


class HisError(Exception):
    """kind is one of network_error, timeout, server_error, client_error."""

    def __init__(self, kind: str, detail: str = "", status: Optional[int] = None):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind
        self.status = status

    @property
    def retryable(self) -> bool:
        return self.kind != "client_error"


@dataclass(frozen=True)
class PostAck:
    accepted: int
    duplicates: int


class HisClient:
    def __init__(self, base_url: str, timeout: float = 10.0, headers: Optional[dict] = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._client = httpx.AsyncClient(base_url=self.base_url, timeout=timeout, headers=headers or {})

    async def close(self) -> None:
        await self._client.aclose()

    async def __aenter__(self):
        return self

    async def __aexit__(self, *exc):
        await self.close()

    async def post_results(self, envelope: UploadEnvelope) -> PostAck:
        return await self.post_raw(envelope.to_json())

    async def post_raw(self, body: bytes) -> PostAck:
        try:
            resp = await self._client.post("/api/v1/results", content=body,
                                           headers={"content-type": "application/json"})
        except httpx.TimeoutException as exc:
            raise HisError("network_error", f"timeout: {exc}") from exc
        except httpx.HTTPError as exc:
            raise HisError("network_error", str(exc) or type(exc).__name__) from exc
        _raise_for_status(resp)
        try:
            data = loads(resp.content)
            return PostAck(int(data["accepted"]), int(data["duplicates"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise HisError("server_error", f"unreadable ack: {exc}", resp.status_code) from exc

    async def fetch_worklist(self, sample_id: str, budget: float = WORKLIST_BUDGET) -> Optional[WorklistOrder]:
        """The order for ``sample_id``, or None when the HIS has none."""
        try:
            resp = await self._client.get(f"/api/v1/worklist/{quote(sample_id, safe='')}",
                                          timeout=httpx.Timeout(budget))
        except httpx.TimeoutException as exc:
            raise HisError("timeout", str(exc)) from exc
        except httpx.HTTPError as exc:
            raise HisError("network_error", str(exc) or type(exc).__name__) from exc
        if resp.status_code == 404:
            return None
        _raise_for_status(resp)
        try:
            return worklist_from_wire(loads(resp.content))
        except (ValueError, KeyError, TypeError) as exc:
            raise HisError("server_error", f"unreadable worklist: {exc}", resp.status_code) from exc


def _raise_for_status(resp: httpx.Response) -> None:
    if resp.status_code >= 500:
        raise HisError("server_error", resp.text[:200], resp.status_code)
    if resp.status_code >= 400:
        raise HisError("client_error", resp.text[:200], resp.status_code)
    if resp.status_code != 200:
        raise HisError("server_error", f"unexpected status {resp.status_code}", resp.status_code)
