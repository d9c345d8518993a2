"""Format catalog: format IDs mapped to parsing configuration.

Built-in formats live in ``builtin.json``; a registry can add its own with
the same shape.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Any, Optional

from ..astm.records import DEFAULT_LAYOUT, Layout, override_layout
from ..framing import FileDescriptor, FrameDescriptor

PROTOCOLS = ("astm", "hl7", "generic", "file")


@dataclass(frozen=True)
class FormatSpec:
    format_id: str
    protocol: str
    layout: Layout = None  # type: ignore[assignment]
    frame: Optional[FrameDescriptor] = None
    file: Optional[FileDescriptor] = None
    source: dict = None  # type: ignore[assignment]

    @property
    def handle(self):
        """The object a session needs to parse this format."""
        return {"astm": self.layout, "generic": self.frame, "file": self.file}.get(self.protocol)


def format_from_dict(d: dict[str, Any]) -> FormatSpec:
    fid, proto = d["format_id"], d["protocol"]
    if proto not in PROTOCOLS:
        raise ValueError(f"format {fid}: unknown protocol {proto!r}")
    layout = frame = file = None
    if proto == "astm":
        layout = override_layout(d.get("layout_overrides") or {}) if d.get("layout_overrides") else DEFAULT_LAYOUT
    elif proto == "generic":
        frame = FrameDescriptor(format_id=fid, **d["frame"])
    elif proto == "file":
        file = FileDescriptor(format_id=fid, **d["file"])
    return FormatSpec(fid, proto, layout, frame, file, dict(d))


def load_builtin() -> dict[str, FormatSpec]:
    text = resources.files(__package__).joinpath("builtin.json").read_text()
    return {d["format_id"]: format_from_dict(d) for d in json.loads(text)["formats"]}


BUILTIN = load_builtin()
