"""Length-prefixed frames: u32 big-endian length, one tag byte, then the body.

The length covers the tag and the body. Bodies are the canonical
serialization from :mod:`reconfsm.codec`.
"""
from __future__ import annotations

import json
import struct

from .. import codec
from ..rrsm import JoinMsg, StateMsg

TAG_JOIN, TAG_STATE, TAG_BACKEND, TAG_CLIENT_REQUEST, TAG_CLIENT_REPLY, TAG_ADMIN = range(6)

_HEADER = struct.Struct(">IB")
MAX_FRAME = 1 << 30


class FrameError(ValueError):
    pass


def encode_frame(tag: int, body: bytes) -> bytes:
    if not 0 <= tag <= 255:
        raise FrameError(f"tag {tag} does not fit in a byte")
    return _HEADER.pack(len(body) + 1, tag) + body


class FrameDecoder:
    """Incremental decoder: ``feed`` bytes, get back complete ``(tag, body)`` pairs."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple[int, bytes]]:
        self._buf += data
        frames = []
        buf = self._buf
        pos = 0
        while len(buf) - pos >= 5:
            length, tag = _HEADER.unpack_from(buf, pos)
            if length < 1 or length > MAX_FRAME:
                raise FrameError(f"bad frame length {length}")
            end = pos + 4 + length
            if end > len(buf):
                break
            frames.append((tag, bytes(buf[pos + 5:end])))
            pos = end
        if pos:
            del buf[:pos]
        return frames


def encode_message(msg) -> tuple[int, bytes]:
    kind = type(msg)
    if kind is JoinMsg:
        return TAG_JOIN, codec.encode_join(msg)
    if kind is StateMsg:
        lines = [codec.encode_entry(e) for e in msg.entries]
        return TAG_STATE, codec.encode_state(msg.length, msg.view, lines)
    return TAG_BACKEND, codec.dumps(codec.backend_to_json(msg)).encode()


def decode_message(tag: int, body: bytes, skip: int = 0):
    if tag == TAG_JOIN:
        return codec.decode_join(body)
    if tag == TAG_STATE:
        return codec.decode_state(body, skip)
    if tag == TAG_BACKEND:
        return codec.backend_from_json(json.loads(body))
    raise FrameError(f"tag {tag} is not a replica message")


def encode_json(tag: int, obj) -> bytes:
    return encode_frame(tag, codec.dumps(obj).encode())


def roundtrip(msg):
    """Encode and decode ``msg`` through the wire format (used by simulator tests)."""
    tag, body = encode_message(msg)
    frames = FrameDecoder().feed(encode_frame(tag, body))
    (tag2, body2), = frames
    return decode_message(tag2, body2)
