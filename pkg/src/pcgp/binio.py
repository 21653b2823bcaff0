#!/usr/bin/env python3
"""Little-endian binary reading with byte-offset error reporting."""

import struct

import numpy as np

from pcgp import common as rc


class ByteReader:
    """Sequential reader over an in-memory file image."""

    def __init__(self, data: bytes, path: str | None = None):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise rc.FormatError(
                f"truncated file while reading {what}: need {size} bytes, "
                f"{len(self.data) - self.offset} left",
                self.offset,
                self.path,
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, count: int, what: str) -> np.ndarray:
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def expect_magic(self, magic: bytes) -> None:
        start = self.offset
        found = self.take(len(magic), "magic")
        if found != magic:
            raise rc.FormatError(f"bad magic {found!r}, expected {magic!r}", start, self.path)

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise rc.FormatError(
                f"{len(self.data) - self.offset} unexpected trailing bytes", self.offset, self.path
            )


def f64_bytes(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f8").tobytes()
