"""Routing core of the broker, shared by the TCP server and the loopback network."""

from __future__ import annotations

import hmac
import logging
from dataclasses import dataclass, field

from .session import Qos2Session
from .wire import CONNACK_BAD_TOKEN, CONNACK_OK, MsgType, WireFrame

log = logging.getLogger(__name__)

Outgoing = list[tuple[int, WireFrame]]


@dataclass
class _Conn:
    session: Qos2Session
    authed: bool = False
    topics: set[str] = field(default_factory=set)


class BrokerCore:
    def __init__(self, token: str, timeout: float = 1.0, max_retries: int = 10):
        self.token = token
        self.timeout = timeout
        self.max_retries = max_retries
        self.conns: dict[int, _Conn] = {}
        self.dropped_deliveries = 0

    def open(self, conn_id: int) -> None:
        self.conns[conn_id] = _Conn(Qos2Session(self.timeout, self.max_retries))

    def close(self, conn_id: int) -> None:
        self.conns.pop(conn_id, None)

    def handle(self, conn_id: int, frame: WireFrame, now: float) -> tuple[Outgoing, bool]:
        """Process one inbound frame; returns frames to send and whether to hang up."""
        conn = self.conns.get(conn_id)
        if conn is None:
            return [], True
        t = frame.msg_type
        if t is MsgType.CONNECT:
            ok = hmac.compare_digest(frame.payload, self.token.encode("utf-8"))
            conn.authed = ok
            code = CONNACK_OK if ok else CONNACK_BAD_TOKEN
            return [(conn_id, WireFrame(MsgType.CONNACK, 0, None, bytes([code])))], not ok
        if not conn.authed:
            return [], True
        if t is MsgType.SUBSCRIBE:
            conn.topics.add(frame.topic)
            return [(conn_id, WireFrame(MsgType.SUBACK, frame.packet_id))], False
        if t is MsgType.PING:
            return [(conn_id, WireFrame(MsgType.PONG, frame.packet_id))], False
        ev = conn.session.handle(frame, now)
        out: Outgoing = [(conn_id, f) for f in ev.send]
        for topic, payload in ev.delivered:
            out += self._route(topic, payload, now)
        return out, False

    def _route(self, topic: str, payload: bytes, now: float) -> Outgoing:
        out: Outgoing = []
        for cid in sorted(self.conns):
            conn = self.conns[cid]
            if conn.authed and topic in conn.topics:
                ev = conn.session.publish(topic, payload, None, now)
                out += [(cid, f) for f in ev.send]
        return out

    def poll(self, now: float) -> Outgoing:
        out: Outgoing = []
        for cid in sorted(self.conns):
            ev = self.conns[cid].session.poll(now)
            if ev.failed:
                self.dropped_deliveries += len(ev.failed)
                log.warning("connection %d: %d deliveries exhausted retries", cid, len(ev.failed))
            out += [(cid, f) for f in ev.send]
        return out

    def next_deadline(self) -> float | None:
        return min(
            (d for c in self.conns.values() if (d := c.session.next_deadline()) is not None),
            default=None,
        )
