"""Little helpers shared by the binary file formats (PDMT, PDMF, PDMW)."""

from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagicError, DimensionError, TruncatedError

# refuse headers that would describe more than 2**34 floats (128 GiB)
MAX_ELEMENTS = 1 << 34


class Reader:
    def __init__(self, data: bytes, path=None):
        self.data = data
        self.pos = 0
        self.path = path

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int, what: str) -> bytes:
        if n > self.remaining():
            raise TruncatedError(
                f"truncated {what}: need {n} bytes, {self.remaining()} left", self.pos, self.path
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def magic(self, expected: bytes) -> None:
        got = self.data[: len(expected)]
        if got != expected:
            raise BadMagicError(got, expected, self.path)
        self.pos = len(expected)

    def u32(self, what: str = "u32", endian: str = "<") -> int:
        return struct.unpack(endian + "I", self.take(4, what))[0]

    def u64(self, what: str = "u64") -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def f64(self, count: int, what: str = "payload") -> np.ndarray:
        if count > MAX_ELEMENTS:
            raise DimensionError(f"{what} element count {count} exceeds limit", self.pos, self.path)
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)

    def at_end(self) -> bool:
        return self.pos >= len(self.data)


def checked_count(dims, what: str, offset: int, path=None) -> int:
    n = 1
    for d in dims:
        n *= int(d)
        if n > MAX_ELEMENTS:
            raise DimensionError(f"{what} dimensions {tuple(dims)} overflow the element limit", offset, path)
    return n


def f64_bytes(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()
