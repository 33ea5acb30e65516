"""Byte-level encoding helpers shared by key files, database files and frames.

All multi-byte integers are big-endian.  Arbitrary-precision integers
("bigints") are encoded as a 4-byte length followed by the unsigned
big-endian magnitude; zero encodes as a single 0x00 byte.
"""

from __future__ import annotations

import struct


class WireError(ValueError):
    """Raised when encoded data is truncated or malformed."""


def put_u8(buf: bytearray, value: int) -> None:
    if not 0 <= value < 256:
        raise WireError(f"u8 out of range: {value}")
    buf.append(value)


def put_u32(buf: bytearray, value: int) -> None:
    if not 0 <= value < 2**32:
        raise WireError(f"u32 out of range: {value}")
    buf += struct.pack(">I", value)


def put_bigint(buf: bytearray, value: int) -> None:
    if value < 0:
        raise WireError("bigint must be nonnegative")
    raw = value.to_bytes(max(1, (value.bit_length() + 7) // 8), "big")
    put_u32(buf, len(raw))
    buf += raw


def put_utf8(buf: bytearray, text: str) -> None:
    raw = text.encode("utf-8")
    put_u32(buf, len(raw))
    buf += raw


class Reader:
    """Sequential reader over one encoded buffer."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise WireError("truncated data")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def bigint(self) -> int:
        return int.from_bytes(self.take(self.u32()), "big")

    def utf8(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WireError(f"invalid UTF-8: {exc}") from exc

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def expect_end(self) -> None:
        if self.remaining:
            raise WireError(f"{self.remaining} trailing bytes")
