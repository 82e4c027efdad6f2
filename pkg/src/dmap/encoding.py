"""Canonical binary encoding shared by every protocol object.

Layout rules: fields in declaration order, integers big-endian fixed
width, byte strings 4-byte length-prefixed, lists 4-byte count-prefixed.
Every top-level object starts with a 1-byte type tag so encodings of
different types can never collide and unions (e.g. block tx lists) are
decodable.
"""

from __future__ import annotations

import struct
from typing import Callable


class DecodeError(ValueError):
    """Raised when bytes do not parse as a well-formed protocol object."""


class Writer:
    def __init__(self) -> None:
        self._chunks: list[bytes] = []

    def raw(self, data: bytes) -> None:
        self._chunks.append(bytes(data))

    def u8(self, value: int) -> None:
        self._chunks.append(struct.pack(">B", value))

    def u32(self, value: int) -> None:
        self._chunks.append(struct.pack(">I", value))

    def u64(self, value: int) -> None:
        self._chunks.append(struct.pack(">Q", value))

    def i32(self, value: int) -> None:
        self._chunks.append(struct.pack(">i", value))

    def bytes_(self, data: bytes) -> None:
        self.u32(len(data))
        self.raw(data)

    def string(self, text: str) -> None:
        self.bytes_(text.encode("utf-8"))

    def getvalue(self) -> bytes:
        return b"".join(self._chunks)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def raw(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise DecodeError("truncated input")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return struct.unpack(">B", self.raw(1))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.raw(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.raw(8))[0]

    def i32(self) -> int:
        return struct.unpack(">i", self.raw(4))[0]

    def bytes_(self) -> bytes:
        return self.raw(self.u32())

    def string(self) -> str:
        try:
            return self.bytes_().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid utf-8: {exc}") from exc

    def expect_eof(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError("trailing bytes after object")

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos


# Type-tag registry. Modules register their wire types at import time;
# the tag byte leads every canonical encoding.

_ENCODERS: dict[type, tuple[int, Callable]] = {}
_DECODERS: dict[int, Callable] = {}


def register_codec(cls: type, tag: int,
                   encode_body: Callable[[object, Writer], None],
                   decode_body: Callable[[Reader], object]) -> None:
    if tag in _DECODERS:
        raise ValueError(f"tag {tag:#x} already registered")
    _ENCODERS[cls] = (tag, encode_body)
    _DECODERS[tag] = decode_body


def encode_into(obj: object, w: Writer) -> None:
    """Write the tagged canonical encoding of `obj` into `w`."""
    try:
        tag, body = _ENCODERS[type(obj)]
    except KeyError:
        raise TypeError(f"no canonical codec for {type(obj).__name__}") from None
    w.u8(tag)
    body(obj, w)


def canonical_encode(obj: object) -> bytes:
    w = Writer()
    encode_into(obj, w)
    return w.getvalue()


def decode_from(r: Reader) -> object:
    tag = r.u8()
    try:
        body = _DECODERS[tag]
    except KeyError:
        raise DecodeError(f"unknown type tag {tag:#x}") from None
    return body(r)


def canonical_decode(data: bytes) -> object:
    r = Reader(data)
    obj = decode_from(r)
    r.expect_eof()
    return obj
