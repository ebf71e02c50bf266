"""Little-endian container helpers shared by the CATD/CNET/CEXP formats."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np


class ContainerError(ValueError):
    """Raised when a binary container is malformed.

    The byte offset at which decoding failed is kept in ``offset``.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def raw(self, data: bytes) -> None:
        self._parts.append(data)

    def u32(self, value: int) -> None:
        self._parts.append(struct.pack("<I", int(value)))

    def u32_array(self, values) -> None:
        self._parts.append(np.asarray(values, dtype="<u4").tobytes())

    def array(self, values, dtype: str) -> None:
        self._parts.append(np.ascontiguousarray(values, dtype=dtype).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes, name: str = "container") -> None:
        self.data = data
        self.pos = 0
        self.name = name

    def _take(self, nbytes: int, what: str) -> bytes:
        if nbytes < 0 or self.pos + nbytes > len(self.data):
            raise ContainerError(
                f"{self.name}: truncated while reading {what}", self.pos
            )
        chunk = self.data[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return chunk

    def magic(self, expected: bytes) -> None:
        got = self._take(len(expected), "magic")
        if got != expected:
            raise ContainerError(
                f"{self.name}: bad magic {got!r}, expected {expected!r}", 0
            )

    def version(self, supported: int) -> int:
        start = self.pos
        version = self.u32("version")
        if version == 0 or version > supported:
            raise ContainerError(
                f"{self.name}: unsupported version {version} (reader knows <= {supported})",
                start,
            )
        return version

    def u32(self, what: str = "u32") -> int:
        return struct.unpack("<I", self._take(4, what))[0]

    def array(self, count: int, dtype: str, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        chunk = self._take(count * itemsize, what)
        return np.frombuffer(chunk, dtype=dtype).copy()

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise ContainerError(
                f"{self.name}: {len(self.data) - self.pos} trailing bytes", self.pos
            )


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_sidecar(path, payload: dict) -> Path:
    target = sidecar_path(path)
    target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return target


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
