"""Binary framing for the MQTT-style protocol (all integers little-endian).

::

    u32 length of everything after this field
    u8  msg_type
    u16 packet_id
    u16 topic_len + topic bytes     (PUBLISH and SUBSCRIBE only)
    payload bytes
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from ..errors import MalformedFrame

RESERVED_TOPICS = ("fl/local", "fl/global")
MAX_FRAME = 64 * 1024 * 1024


class MsgType(enum.IntEnum):
    CONNECT = 1
    CONNACK = 2
    SUBSCRIBE = 3
    SUBACK = 4
    PUBLISH = 5
    PUBREC = 6
    PUBREL = 7
    PUBCOMP = 8
    PING = 9
    PONG = 10


WITH_TOPIC = {MsgType.PUBLISH, MsgType.SUBSCRIBE}
NEEDS_ID = {MsgType.PUBLISH, MsgType.PUBREC, MsgType.PUBREL, MsgType.PUBCOMP}

CONNACK_OK = 0x00
CONNACK_BAD_TOKEN = 0x05


def check_topic(topic: str) -> str:
    if not topic or "+" in topic or "#" in topic:
        raise MalformedFrame(f"invalid topic {topic!r}")
    return topic


@dataclass(frozen=True)
class WireFrame:
    msg_type: MsgType
    packet_id: int = 0
    topic: str | None = None
    payload: bytes = b""

    def __post_init__(self):
        try:
            object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        except ValueError:
            raise MalformedFrame(f"unknown msg_type {self.msg_type}") from None
        if not 0 <= self.packet_id <= 0xFFFF:
            raise MalformedFrame(f"packet_id {self.packet_id} out of range")
        if self.msg_type in NEEDS_ID and self.packet_id == 0:
            raise MalformedFrame(f"{self.msg_type.name} needs a non-zero packet_id")
        if self.msg_type in WITH_TOPIC:
            if self.topic is None:
                raise MalformedFrame(f"{self.msg_type.name} needs a topic")
            check_topic(self.topic)
        elif self.topic is not None:
            raise MalformedFrame(f"{self.msg_type.name} carries no topic")


def encode(frame: WireFrame) -> bytes:
    body = struct.pack("<BH", frame.msg_type, frame.packet_id)
    if frame.msg_type in WITH_TOPIC:
        t = frame.topic.encode("utf-8")
        body += struct.pack("<H", len(t)) + t
    body += frame.payload
    return struct.pack("<I", len(body)) + body


def decode_body(body: bytes) -> WireFrame:
    """Decode everything after the length prefix."""
    if len(body) < 3:
        raise MalformedFrame("frame body shorter than header")
    msg_type, packet_id = struct.unpack_from("<BH", body, 0)
    if msg_type not in MsgType._value2member_map_:
        raise MalformedFrame(f"unknown msg_type {msg_type}")
    pos = 3
    topic = None
    if msg_type in WITH_TOPIC:
        if len(body) < pos + 2:
            raise MalformedFrame("missing topic length")
        (tlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        if len(body) < pos + tlen:
            raise MalformedFrame("topic runs past frame end")
        try:
            topic = body[pos : pos + tlen].decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedFrame("topic is not UTF-8") from None
        pos += tlen
    return WireFrame(MsgType(msg_type), packet_id, topic, bytes(body[pos:]))


def decode(data: bytes) -> WireFrame:
    """Decode exactly one frame; trailing or missing bytes are an error."""
    if len(data) < 4:
        raise MalformedFrame("missing length prefix")
    (length,) = struct.unpack_from("<I", data, 0)
    if length != len(data) - 4:
        raise MalformedFrame(f"length field says {length}, frame has {len(data) - 4}")
    return decode_body(data[4:])


class FrameReader:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[WireFrame]:
        self._buf.extend(data)
        out = []
        while len(self._buf) >= 4:
            (length,) = struct.unpack_from("<I", self._buf, 0)
            if length > MAX_FRAME:
                raise MalformedFrame(f"frame of {length} bytes exceeds limit")
            if len(self._buf) < 4 + length:
                break
            body = bytes(self._buf[4 : 4 + length])
            del self._buf[: 4 + length]
            out.append(decode_body(body))
        return out
