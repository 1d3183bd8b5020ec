"""Transport-independent QoS-2 state machines for one side of a connection.

A :class:`Qos2Session` both sends (PUBLISH -> PUBREC -> PUBREL -> PUBCOMP)
and receives. The receiver hands a message up the first time it sees a
PUBLISH for a packet id and remembers the id until the matching PUBREL, so
retransmitted or duplicated PUBLISH frames are acknowledged but never
delivered twice. Only ``max_inflight`` outgoing messages are unacknowledged
at once; with the default of one, delivery order equals publish order.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any

from .wire import MsgType, WireFrame


@dataclass
class _Outgoing:
    packet_id: int
    topic: str
    payload: bytes
    token: Any
    stage: MsgType  # PUBLISH while waiting for PUBREC, PUBREL while waiting for PUBCOMP
    deadline: float
    retries: int = 0

    def frame(self) -> WireFrame:
        if self.stage is MsgType.PUBLISH:
            return WireFrame(MsgType.PUBLISH, self.packet_id, self.topic, self.payload)
        return WireFrame(MsgType.PUBREL, self.packet_id)


@dataclass
class SessionEvents:
    send: list[WireFrame] = field(default_factory=list)
    delivered: list[tuple[str, bytes]] = field(default_factory=list)
    completed: list[Any] = field(default_factory=list)
    failed: list[Any] = field(default_factory=list)

    def extend(self, other: "SessionEvents") -> "SessionEvents":
        self.send += other.send
        self.delivered += other.delivered
        self.completed += other.completed
        self.failed += other.failed
        return self


class Qos2Session:
    def __init__(self, timeout: float = 1.0, max_retries: int = 10, max_inflight: int = 1):
        self.timeout = timeout
        self.max_retries = max_retries
        self.max_inflight = max_inflight
        self._pending: deque[tuple[str, bytes, Any]] = deque()
        self._inflight: dict[int, _Outgoing] = {}
        self._awaiting_rel: set[int] = set()
        self._last_id = 0
        self.retransmitted_frames = 0
        self.retransmitted_bytes = 0

    # -- sending ----------------------------------------------------------

    def publish(self, topic: str, payload: bytes, token: Any, now: float) -> SessionEvents:
        self._pending.append((topic, payload, token))
        return SessionEvents(send=self._start_pending(now))

    def _alloc_id(self) -> int:
        pid = self._last_id
        while True:
            pid = pid % 0xFFFF + 1
            if pid not in self._inflight:
                self._last_id = pid
                return pid

    def _start_pending(self, now: float) -> list[WireFrame]:
        out = []
        while self._pending and len(self._inflight) < self.max_inflight:
            topic, payload, token = self._pending.popleft()
            ent = _Outgoing(self._alloc_id(), topic, payload, token, MsgType.PUBLISH, now + self.timeout)
            self._inflight[ent.packet_id] = ent
            out.append(ent.frame())
        return out

    @property
    def idle(self) -> bool:
        return not self._pending and not self._inflight

    def next_deadline(self) -> float | None:
        return min((e.deadline for e in self._inflight.values()), default=None)

    def poll(self, now: float) -> SessionEvents:
        """Retransmit every in-flight message whose acknowledgment timed out."""
        ev = SessionEvents()
        for pid in sorted(self._inflight):
            ent = self._inflight[pid]
            if ent.deadline > now:
                continue
            if ent.retries >= self.max_retries:
                del self._inflight[pid]
                ev.failed.append(ent.token)
                continue
            ent.retries += 1
            ent.deadline = now + self.timeout
            frame = ent.frame()
            self.retransmitted_frames += 1
            if frame.msg_type is MsgType.PUBLISH:
                self.retransmitted_bytes += len(frame.payload)
            ev.send.append(frame)
        if ev.failed:
            ev.send += self._start_pending(now)
        return ev

    # -- receiving --------------------------------------------------------

    def handle(self, frame: WireFrame, now: float) -> SessionEvents:
        ev = SessionEvents()
        t, pid = frame.msg_type, frame.packet_id
        if t is MsgType.PUBLISH:
            if pid not in self._awaiting_rel:
                self._awaiting_rel.add(pid)
                ev.delivered.append((frame.topic, frame.payload))
            ev.send.append(WireFrame(MsgType.PUBREC, pid))
        elif t is MsgType.PUBREL:
            self._awaiting_rel.discard(pid)
            ev.send.append(WireFrame(MsgType.PUBCOMP, pid))
        elif t is MsgType.PUBREC:
            ent = self._inflight.get(pid)
            if ent is not None:
                if ent.stage is MsgType.PUBLISH:
                    ent.stage = MsgType.PUBREL
                    ent.retries = 0
                    ent.deadline = now + self.timeout
                ev.send.append(ent.frame())
        elif t is MsgType.PUBCOMP:
            ent = self._inflight.get(pid)
            if ent is not None and ent.stage is MsgType.PUBREL:
                del self._inflight[pid]
                ev.completed.append(ent.token)
                ev.send += self._start_pending(now)
        return ev
