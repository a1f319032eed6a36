"""Low-level helpers for the KGXE/KGXS/KGXM binary family.

All integers are little-endian: u16 for format versions, u32 for lengths
and counts. Strings are length-prefixed UTF-8; vector payloads are
float32 little-endian.
"""

from __future__ import annotations

import json
import struct
from io import BytesIO

from .errors import FormatError


class Reader:
    """Cursor over bytes that turns truncation into FormatError."""

    def __init__(self, data: bytes):
        self._buf = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._buf):
            raise FormatError("unexpected end of file")
        chunk = self._buf[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 in string field: {exc}") from exc

    def json_block(self) -> dict:
        text = self.string()
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"corrupt metadata block: {exc}") from exc
        if not isinstance(obj, dict):
            raise FormatError("metadata block must be a JSON object")
        return obj

    def block(self) -> bytes:
        return self.take(self.u32())

    def at_end(self) -> bool:
        return self._pos == len(self._buf)

    def expect_end(self) -> None:
        if not self.at_end():
            raise FormatError(f"{len(self._buf) - self._pos} trailing bytes after payload")


class Writer:
    def __init__(self):
        self._buf = BytesIO()

    def raw(self, data: bytes) -> None:
        self._buf.write(data)

    def u16(self, value: int) -> None:
        self._buf.write(struct.pack("<H", value))

    def u32(self, value: int) -> None:
        self._buf.write(struct.pack("<I", value))

    def string(self, text: str) -> None:
        raw = text.encode("utf-8")
        self.u32(len(raw))
        self.raw(raw)

    def json_block(self, obj: dict) -> None:
        self.string(json.dumps(obj, sort_keys=True, separators=(",", ":")))

    def block(self, data: bytes) -> None:
        self.u32(len(data))
        self.raw(data)

    def getvalue(self) -> bytes:
        return self._buf.getvalue()


def check_magic(reader: Reader, magic: bytes, expected_version: int) -> int:
    got = reader.take(len(magic))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    version = reader.u16()
    if version != expected_version:
        raise FormatError(f"unsupported version {version} for {magic.decode()!r}")
    return version
