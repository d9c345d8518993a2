"""Local control endpoint of a running gateway, and the client the CLI uses.

GET  /status                -> status report
POST /ingest                {"device_id", "operator_id", "path" | "content_b64"} -> ingest report
POST /deadletters/export    {"path"} -> {"exported": n, "path": ...}
"""
from __future__ import annotations

import asyncio
import base64
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Optional

import httpx

from .framing import FramingError
from .registry import RegistryError

log = logging.getLogger(__name__)

CALL_TIMEOUT = 30.0


class GatewayNotRunning(Exception):
    pass


class ControlError(Exception):
    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind


class _Handler(BaseHTTPRequestHandler):
    server_version = "labgate-control/1"

    def log_message(self, fmt, *args):
        log.debug("control: " + fmt, *args)

    def _send(self, code: int, body: Any) -> None:
        data = json.dumps(body, sort_keys=True).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _call(self, fn, *args):
        service = self.server.service
        fut = asyncio.run_coroutine_threadsafe(_as_coro(fn, *args), service.loop)
        return fut.result(CALL_TIMEOUT)

    def do_GET(self):
        if self.path.rstrip("/") == "/status":
            self._send(200, self._call(self.server.service.status))
        else:
            self._send(404, {"error": "not_found"})

    def do_POST(self):
        try:
            length = int(self.headers.get("Content-Length") or 0)
            body = json.loads(self.rfile.read(length) or b"{}")
        except (ValueError, json.JSONDecodeError):
            self._send(400, {"error": "bad_request"})
            return
        service = self.server.service
        try:
            if self.path == "/ingest":
                if "content_b64" in body:
                    content = base64.b64decode(body["content_b64"])
                else:
                    content = Path(body["path"]).read_bytes()
                result = self._call(service.ingest_file, body["device_id"], content, body["operator_id"])
                self._send(200, result.to_dict())
            elif self.path == "/deadletters/export":
                n = self._call(service.export_deadletters, body["path"])
                self._send(200, {"exported": n, "path": body["path"]})
            else:
                self._send(404, {"error": "not_found"})
        except (RegistryError, FramingError) as exc:
            self._send(422, {"error": exc.kind, "detail": str(exc)})
        except KeyError as exc:
            self._send(400, {"error": "bad_request", "detail": f"missing {exc}"})
        except OSError as exc:
            self._send(500, {"error": "io_error", "detail": str(exc)})


async def _as_coro(fn, *args):
    return fn(*args)


class ControlServer:
    def __init__(self, service, host: str, port: int):
        self.httpd = ThreadingHTTPServer((host, port), _Handler)
        self.httpd.daemon_threads = True
        self.httpd.service = service
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self.httpd.server_address[:2]

    def start(self) -> None:
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="control", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()


# ---------------------------------------------------------------- client

class ControlClient:
    def __init__(self, endpoint: str, timeout: float = CALL_TIMEOUT):
        self.base = f"http://{endpoint}"
        self.timeout = timeout

    def _request(self, method: str, path: str, body: Optional[dict] = None) -> dict:
        try:
            resp = httpx.request(method, self.base + path, json=body, timeout=self.timeout)
        except httpx.ConnectError as exc:
            raise GatewayNotRunning(f"no gateway at {self.base}: {exc}") from None
        except httpx.HTTPError as exc:
            raise ControlError("control_error", str(exc)) from None
        data = resp.json()
        if resp.status_code != 200:
            raise ControlError(data.get("error", "control_error"), data.get("detail", ""))
        return data

    def status(self) -> dict:
        return self._request("GET", "/status")

    def ingest(self, device_id: str, content: bytes, operator_id: str) -> dict:
        return self._request("POST", "/ingest", {
            "device_id": device_id, "operator_id": operator_id,
            "content_b64": base64.b64encode(content).decode()})

    def export_deadletters(self, path: str) -> dict:
        return self._request("POST", "/deadletters/export", {"path": str(Path(path).resolve())})
