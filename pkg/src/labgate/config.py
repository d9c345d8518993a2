"""Gateway configuration file (JSON).

Relative paths are resolved against the directory holding the config file.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .astm.transport import Timers

ENV_VAR = "GMEI_CONFIG"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class HisSettings:
    base_url: Optional[str] = None
    timeout: float = 10.0
    worklist_budget: float = 5.0


@dataclass(frozen=True)
class UploaderSettings:
    batch_max: int = 100
    flush_idle: float = 2.0
    backoff_base: float = 1.0
    backoff_factor: float = 2.0
    backoff_cap: float = 60.0
    fsync: bool = True
    drain_timeout: float = 10.0


@dataclass(frozen=True)
class GatewayConfig:
    gateway_id: str
    registry: Path
    data_dir: Path
    control_endpoint: str = "127.0.0.1:8740"
    his: HisSettings = field(default_factory=HisSettings)
    uploader: UploaderSettings = field(default_factory=UploaderSettings)
    timers: Timers = field(default_factory=Timers)
    audit_log: Optional[Path] = None
    shutdown_grace: float = 5.0
    path: Optional[Path] = None

    @property
    def control_host_port(self) -> tuple[str, int]:
        host, _, port = self.control_endpoint.rpartition(":")
        return host or "127.0.0.1", int(port)

    @property
    def queue_dir(self) -> Path:
        return self.data_dir / "queue"

    def to_dict(self) -> dict:
        return {
            "gateway_id": self.gateway_id,
            "registry": str(self.registry),
            "data_dir": str(self.data_dir),
            "control_endpoint": self.control_endpoint,
            "his": vars(self.his).copy(),
            "uploader": vars(self.uploader).copy(),
            "timers": vars(self.timers).copy(),
            "audit_log": str(self.audit_log) if self.audit_log else None,
            "shutdown_grace": self.shutdown_grace,
        }


def _section(cls, data, name: str, where: str):
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: '{name}' must be an object")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: bad '{name}' section: {exc}") from None


def parse_config(data: dict, base: Path = Path("."), where: str = "<config>") -> GatewayConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: top level must be an object")
    for key in ("gateway_id", "registry", "data_dir"):
        if not data.get(key):
            raise ConfigError(f"{where}: missing required key '{key}'")
    known = {"gateway_id", "registry", "data_dir", "control_endpoint", "his", "uploader", "timers",
             "audit_log", "shutdown_grace"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    endpoint = data.get("control_endpoint", "127.0.0.1:8740")
    if not str(endpoint).rpartition(":")[2].isdigit():
        raise ConfigError(f"{where}: control_endpoint {endpoint!r} is not host:port")
    return GatewayConfig(
        gateway_id=str(data["gateway_id"]),
        registry=resolve(data["registry"]),
        data_dir=resolve(data["data_dir"]),
        control_endpoint=endpoint,
        his=_section(HisSettings, data.get("his"), "his", where),
        uploader=_section(UploaderSettings, data.get("uploader"), "uploader", where),
        timers=_section(Timers, data.get("timers"), "timers", where),
        audit_log=resolve(data["audit_log"]) if data.get("audit_log") else None,
        shutdown_grace=float(data.get("shutdown_grace", 5.0)),
        path=None,
    )


def load_config(path: Optional[os.PathLike] = None) -> GatewayConfig:
    """Load from ``path`` or ``$GMEI_CONFIG``. Errors carry file and line."""
    if path is None:
        path = os.environ.get(ENV_VAR)
        if not path:
            raise ConfigError(f"no config given: use --config or set {ENV_VAR}")
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    cfg = parse_config(data, path.parent, str(path))
    return GatewayConfig(**{**cfg.__dict__, "path": path})


def write_config(cfg: GatewayConfig, path: os.PathLike) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
