"""Equipment, test-parameter and user masters, persisted as one JSON document.

Readers work on an immutable :class:`Registry` snapshot. Every mutation builds
a new snapshot, validates it, writes it to a temp file and renames it over the
old one, so a crash leaves either the old or the new file on disk.
"""
from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import Any, Iterable, Optional

from .formats import BUILTIN, FormatSpec, format_from_dict

log = logging.getLogger(__name__)

PROTOCOLS = ("astm", "hl7", "generic", "file_only")
MODES = ("unidirectional", "bidirectional")
ROLES = ("technician", "admin")
# device protocol -> format protocol
_FORMAT_PROTOCOL = {"astm": "astm", "hl7": "hl7", "generic": "generic", "file_only": "file"}


class RegistryError(Exception):
    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind


@dataclass(frozen=True)
class CommSettings:
    """Serial settings. Only timeout_ms (ASTM receive timer) and bcc_check are enforced."""

    baud_rate: int = 9600
    data_bits: int = 8
    parity: str = "N"
    stop_bits: int = 1
    timeout_ms: int = 30000
    bcc_check: bool = True


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    display_name: str
    protocol: str
    mode: str
    format_id: str
    listen_endpoint: Optional[str] = None
    comm_settings: CommSettings = field(default_factory=CommSettings)
    facility_id: str = ""
    enabled: bool = True
    file_format_id: Optional[str] = None

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = (self.listen_endpoint or "").rpartition(":")
        return host or "127.0.0.1", int(port)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        d = dict(d)
        d["comm_settings"] = CommSettings(**(d.get("comm_settings") or {}))
        return cls(**d)


@dataclass(frozen=True)
class TestParameterMapping:
    device_id: str
    machine_test_code: str
    test_id: str
    canonical_unit: Optional[str] = None
    conversion_factor: Decimal = Decimal(1)

    __test__ = False  # not a pytest class

    def __post_init__(self):
        object.__setattr__(self, "conversion_factor", Decimal(str(self.conversion_factor)))
        if self.conversion_factor <= 0:
            raise RegistryError("invalid_mapping", "conversion_factor must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conversion_factor"] = str(self.conversion_factor)
        return d


@dataclass(frozen=True)
class UserRecord:
    operator_id: str
    display_name: str = ""
    role: str = "technician"

    def __post_init__(self):
        if self.role not in ROLES:
            raise RegistryError("invalid_user", f"role {self.role!r}")


@dataclass(frozen=True)
class ResolvedFormat:
    protocol: str
    format_id: str
    spec: FormatSpec

    @property
    def handle(self):
        return self.spec.handle


class Registry:
    """Immutable snapshot of the masters."""

    def __init__(self, devices: Iterable[DeviceProfile] = (), mappings: Iterable[TestParameterMapping] = (),
                 users: Iterable[UserRecord] = (), formats: Iterable[dict] = (), version: int = 0):
        self.devices: dict[str, DeviceProfile] = {}
        for d in devices:
            if d.device_id in self.devices:
                raise RegistryError("duplicate_device_id", d.device_id)
            self.devices[d.device_id] = d
        self.mappings: dict[tuple[str, str], TestParameterMapping] = {}
        for m in mappings:
            key = (m.device_id, m.machine_test_code)
            if key in self.mappings:
                raise RegistryError("duplicate_mapping", f"{key[0]}/{key[1]}")
            self.mappings[key] = m
        self.users: dict[str, UserRecord] = {}
        for u in users:
            if u.operator_id in self.users:
                raise RegistryError("duplicate_user", u.operator_id)
            self.users[u.operator_id] = u
        self.custom_formats: tuple[dict, ...] = tuple(formats)
        self.formats: dict[str, FormatSpec] = dict(BUILTIN)
        for f in self.custom_formats:
            self.formats[f["format_id"]] = format_from_dict(f)
        self.version = version
        for d in self.devices.values():
            self._check_device(d)
        self._check_endpoints()

    # ------------------------------------------------------------ validation
    def _check_device(self, p: DeviceProfile) -> None:
        if p.protocol not in PROTOCOLS:
            raise RegistryError("invalid_protocol", p.protocol)
        if p.mode not in MODES:
            raise RegistryError("invalid_mode", p.mode)
        if p.mode == "bidirectional" and p.protocol != "astm":
            raise RegistryError("invalid_mode_for_protocol", f"{p.device_id}: {p.protocol} cannot be bidirectional")
        self._check_format(p.device_id, p.protocol, p.format_id)
        if p.file_format_id:
            self._check_format(p.device_id, "file_only", p.file_format_id)
        if p.protocol != "file_only":
            if not p.listen_endpoint:
                raise RegistryError("missing_endpoint", p.device_id)
            try:
                p.host_port
            except ValueError:
                raise RegistryError("bad_endpoint", f"{p.device_id}: {p.listen_endpoint!r}") from None

    def _check_format(self, device_id: str, protocol: str, format_id: str) -> None:
        spec = self.formats.get(format_id)
        if spec is None:
            raise RegistryError("unknown_format", format_id)
        if spec.protocol != _FORMAT_PROTOCOL[protocol]:
            raise RegistryError("format_protocol_mismatch",
                                f"{device_id}: {format_id} is {spec.protocol}, device is {protocol}")

    def _check_endpoints(self) -> None:
        seen: dict[str, str] = {}
        for d in self.devices.values():
            if not d.enabled or d.protocol == "file_only":
                continue
            other = seen.get(d.listen_endpoint)
            if other is not None:
                raise RegistryError("endpoint_conflict", f"{other} and {d.device_id} both use {d.listen_endpoint}")
            seen[d.listen_endpoint] = d.device_id

    # ------------------------------------------------------------ lookups
    def device(self, device_id: str) -> DeviceProfile:
        try:
            return self.devices[device_id]
        except KeyError:
            raise RegistryError("unknown_device", device_id) from None

    def resolve_format(self, device_id: str) -> ResolvedFormat:
        p = self.device(device_id)
        spec = self.formats[p.format_id]
        return ResolvedFormat(p.protocol, p.format_id, spec)

    def resolve_file_format(self, device_id: str) -> ResolvedFormat:
        p = self.device(device_id)
        fid = p.file_format_id or (p.format_id if p.protocol == "file_only" else None)
        if fid is None:
            raise RegistryError("no_file_format", f"{device_id} has no file descriptor")
        return ResolvedFormat("file_only", fid, self.formats[fid])

    def map_test_code(self, device_id: str, machine_code: str) -> TestParameterMapping:
        m = self.mappings.get((device_id, machine_code))
        if m is None:
            raise RegistryError("unmapped_test_code", f"{device_id}/{machine_code}")
        return m

    def user(self, operator_id: str) -> UserRecord:
        try:
            return self.users[operator_id]
        except KeyError:
            raise RegistryError("unknown_operator", operator_id) from None

    # ------------------------------------------------------------ derivation
    def _derive(self, **changes: Any) -> "Registry":
        args = dict(devices=self.devices.values(), mappings=self.mappings.values(),
                    users=self.users.values(), formats=self.custom_formats, version=self.version + 1)
        args.update(changes)
        return Registry(**args)

    def with_device(self, p: DeviceProfile) -> "Registry":
        if p.device_id in self.devices:
            raise RegistryError("duplicate_device_id", p.device_id)
        return self._derive(devices=list(self.devices.values()) + [p])

    def with_format(self, device_id: str, new_format_id: str) -> "Registry":
        p = self.device(device_id)
        if new_format_id not in self.formats:
            raise RegistryError("unknown_format", new_format_id)
        devices = [replace(d, format_id=new_format_id) if d.device_id == device_id else d
                   for d in self.devices.values()]
        return self._derive(devices=devices)

    def with_mapping(self, m: TestParameterMapping) -> "Registry":
        self.device(m.device_id)
        return self._derive(mappings=list(self.mappings.values()) + [m])

    def with_user(self, u: UserRecord) -> "Registry":
        return self._derive(users=list(self.users.values()) + [u])

    def with_custom_format(self, fmt: dict) -> "Registry":
        format_from_dict(fmt)
        if fmt["format_id"] in self.formats:
            raise RegistryError("duplicate_format", fmt["format_id"])
        return self._derive(formats=self.custom_formats + (fmt,))

    # ------------------------------------------------------------ persistence
    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "devices": [d.to_dict() for d in self.devices.values()],
            "mappings": [m.to_dict() for m in self.mappings.values()],
            "users": [asdict(u) for u in self.users.values()],
            "formats": list(self.custom_formats),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Registry":
        return cls(
            devices=[DeviceProfile.from_dict(x) for x in d.get("devices", [])],
            mappings=[TestParameterMapping(**x) for x in d.get("mappings", [])],
            users=[UserRecord(**x) for x in d.get("users", [])],
            formats=d.get("formats", []),
            version=d.get("version", 0),
        )

    def __eq__(self, other):
        return isinstance(other, Registry) and self.to_dict() == other.to_dict()


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    try:
        dfd = os.open(path.parent, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(dfd)
    finally:
        os.close(dfd)


class RegistryStore:
    """File-backed registry. ``snapshot()`` picks up edits made by other processes."""

    def __init__(self, path: os.PathLike, create: bool = False):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._mtime: Optional[int] = None
        if not self.path.exists():
            if not create:
                raise FileNotFoundError(f"registry file not found: {self.path}")
            self._snapshot = Registry()
            self._save(self._snapshot)
        else:
            self._snapshot = self._load()

    def _load(self) -> Registry:
        st = self.path.stat()
        with open(self.path, "rb") as fh:
            raw = fh.read()
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise RegistryError("corrupt_registry", f"{self.path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        try:
            reg = Registry.from_dict(data)
        except TypeError as exc:
            raise RegistryError("corrupt_registry", f"{self.path}: {exc}") from None
        self._mtime = st.st_mtime_ns
        return reg

    def _save(self, reg: Registry) -> None:
        atomic_write(self.path, (json.dumps(reg.to_dict(), indent=2) + "\n").encode())
        self._mtime = self.path.stat().st_mtime_ns

    def snapshot(self) -> Registry:
        try:
            mtime = self.path.stat().st_mtime_ns
        except FileNotFoundError:
            return self._snapshot
        if mtime != self._mtime:
            with self._lock:
                try:
                    self._snapshot = self._load()
                except RegistryError as exc:
                    log.error("keeping previous registry snapshot: %s", exc)
        return self._snapshot

    def _mutate(self, fn) -> Registry:
        with self._lock:
            current = self._load() if self.path.exists() else self._snapshot
            new = fn(current)
            self._save(new)
            self._snapshot = new
            return new

    def register_device(self, p: DeviceProfile) -> str:
        self._mutate(lambda r: r.with_device(p))
        return p.device_id

    def update_format(self, device_id: str, new_format_id: str) -> str:
        self._mutate(lambda r: r.with_format(device_id, new_format_id))
        return f"{device_id} now uses {new_format_id}"

    def add_mapping(self, m: TestParameterMapping) -> None:
        self._mutate(lambda r: r.with_mapping(m))

    def add_user(self, u: UserRecord) -> None:
        self._mutate(lambda r: r.with_user(u))

    def add_format(self, fmt: dict) -> None:
        self._mutate(lambda r: r.with_custom_format(fmt))

    def resolve_format(self, device_id: str) -> ResolvedFormat:
        return self.snapshot().resolve_format(device_id)

    def map_test_code(self, device_id: str, machine_code: str) -> TestParameterMapping:
        return self.snapshot().map_test_code(device_id, machine_code)
