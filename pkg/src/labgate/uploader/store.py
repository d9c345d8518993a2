"""Append-only record log with per-record checksums.

Record layout: 4-byte big-endian payload length, 4-byte CRC32 of the payload,
payload. On open, the log is scanned and anything after the first damaged
record is truncated: a torn tail can only belong to a write that was never
acknowledged to the caller.
"""
from __future__ import annotations

import errno
import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Iterable, Iterator

log = logging.getLogger(__name__)

_HEADER = struct.Struct(">II")
MAX_RECORD = 64 * 1024 * 1024


class StorageFull(OSError):
    pass


class AppendLog:
    def __init__(self, path: os.PathLike, fsync: bool = True):
        self.path = Path(path)
        self.fsync = fsync
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.truncated_bytes = 0
        records, good_end = self._scan()
        self._recovered = records
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        size = os.fstat(self._fd).st_size
        if good_end < size:
            self.truncated_bytes = size - good_end
            log.warning("%s: truncating %d bytes of damaged tail", self.path, self.truncated_bytes)
            os.ftruncate(self._fd, good_end)
            os.fsync(self._fd)
        os.lseek(self._fd, 0, os.SEEK_END)
        self.size = good_end

    def _scan(self) -> tuple[list[bytes], int]:
        if not self.path.exists():
            return [], 0
        data = self.path.read_bytes()
        out, pos = [], 0
        while pos + _HEADER.size <= len(data):
            length, crc = _HEADER.unpack_from(data, pos)
            end = pos + _HEADER.size + length
            if length > MAX_RECORD or end > len(data):
                break
            payload = data[pos + _HEADER.size:end]
            if zlib.crc32(payload) != crc:
                break
            out.append(payload)
            pos = end
        return out, pos

    def recovered(self) -> list[bytes]:
        """Records found on disk when the log was opened."""
        return self._recovered

    def append(self, payload: bytes) -> int:
        rec = _HEADER.pack(len(payload), zlib.crc32(payload)) + payload
        try:
            written = os.write(self._fd, rec)
            if written != len(rec):
                raise OSError(errno.EIO, "short write")
            if self.fsync:
                os.fsync(self._fd)
        except OSError as exc:
            # leave no partial record behind
            os.ftruncate(self._fd, self.size)
            os.lseek(self._fd, 0, os.SEEK_END)
            if exc.errno in (errno.ENOSPC, errno.EDQUOT):
                raise StorageFull(exc.errno, f"log storage full: {self.path}") from exc
            raise
        pos = self.size
        self.size += len(rec)
        return pos

    def rewrite(self, payloads: Iterable[bytes]) -> None:
        """Atomically replace the whole log (compaction)."""
        tmp = self.path.with_name(self.path.name + ".compact")
        with open(tmp, "wb") as fh:
            for p in payloads:
                fh.write(_HEADER.pack(len(p), zlib.crc32(p)) + p)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)
        os.close(self._fd)
        self._fd = os.open(self.path, os.O_RDWR)
        self.size = os.lseek(self._fd, 0, os.SEEK_END)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1


def iter_records(path: os.PathLike) -> Iterator[bytes]:
    """Read-only scan, stopping at the first damaged record."""
    data = Path(path).read_bytes()
    pos = 0
    while pos + _HEADER.size <= len(data):
        length, crc = _HEADER.unpack_from(data, pos)
        end = pos + _HEADER.size + length
        if end > len(data) or zlib.crc32(data[pos + _HEADER.size:end]) != crc:
            return
        yield data[pos + _HEADER.size:end]
        pos = end
