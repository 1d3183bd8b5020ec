"""Deterministic in-process network: a simulated clock, FIFO links with seeded faults.

Every client/broker link is FIFO; the fault injector may drop a QoS-2 frame,
deliver it twice, or hold it back by ``delay_time`` (later frames on the same
link wait behind it). Control frames (CONNECT, SUBSCRIBE, ...) are never
faulted. Fixed per-message latencies can be charged on PUBLISH legs to
emulate measured publish/receive times.
"""

from __future__ import annotations

import heapq
import itertools
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import AuthRejected, Disconnected, RetryExhausted
from .broker import BrokerCore
from .session import Qos2Session, SessionEvents
from .wire import CONNACK_OK, MsgType, WireFrame, check_topic, encode

BROKER = 0
FAULTABLE = {MsgType.PUBLISH, MsgType.PUBREC, MsgType.PUBREL, MsgType.PUBCOMP}


@dataclass(frozen=True)
class FaultSpec:
    drop: float = 0.0
    dup: float = 0.0
    delay: float = 0.0
    delay_time: float = 0.05


@dataclass
class ClientStats:
    published_messages: int = 0
    published_bytes: int = 0
    received_messages: int = 0
    received_bytes: int = 0
    wire_sent: int = 0
    wire_received: int = 0


class LoopbackNetwork:
    def __init__(
        self,
        seed: int = 0,
        faults: FaultSpec = FaultSpec(),
        token: str = "",
        timeout: float = 1.0,
        max_retries: int = 10,
        latency: float = 0.0,
        publish_latency: float = 0.0,
        receive_latency: float = 0.0,
        keep_trace: bool = True,
    ):
        self.clock = 0.0
        self.faults = faults
        self.rng = np.random.default_rng(seed)
        self.timeout = timeout
        self.max_retries = max_retries
        self.latency = latency
        self.publish_latency = publish_latency
        self.receive_latency = receive_latency
        self.broker = BrokerCore(token, timeout, max_retries)
        self.trace: list[tuple] | None = [] if keep_trace else None
        self._heap: list[tuple] = []
        self._seq = itertools.count()
        self._link_tail: dict[tuple[int, int], float] = {}
        self._clients: dict[int, LoopbackClient] = {}
        self._armed: dict[int, float | None] = {}
        self._next_conn = itertools.count(1)

    # -- scheduling -------------------------------------------------------

    def _push(self, t: float, kind: str, *data) -> None:
        heapq.heappush(self._heap, (t, next(self._seq), kind, data))

    def _record(self, *entry) -> None:
        if self.trace is not None:
            self.trace.append((round(self.clock, 9),) + entry)

    def _transmit(self, src: int, dst: int, frame: WireFrame) -> None:
        size = len(encode(frame))
        if src != BROKER:
            self._clients[src].stats.wire_sent += size
        kind = frame.msg_type
        if kind in FAULTABLE and self.faults.drop and self.rng.random() < self.faults.drop:
            self._record(src, dst, kind.name, frame.packet_id, "drop")
            return
        lat = self.latency
        if kind is MsgType.PUBLISH:
            lat += self.publish_latency if dst == BROKER else self.receive_latency
        if kind in FAULTABLE and self.faults.delay and self.rng.random() < self.faults.delay:
            lat += self.faults.delay_time
        link = (src, dst)
        arrival = max(self.clock + lat, self._link_tail.get(link, 0.0))
        self._link_tail[link] = arrival
        self._push(arrival, "frame", src, dst, frame)
        copies = 1
        if kind in FAULTABLE and self.faults.dup and self.rng.random() < self.faults.dup:
            self._push(arrival, "frame", src, dst, frame)
            copies = 2
        self._record(src, dst, kind.name, frame.packet_id, f"x{copies}")

    def _arm(self, endpoint: int) -> None:
        if endpoint == BROKER:
            d = self.broker.next_deadline()
        else:
            d = self._clients[endpoint].session.next_deadline()
        armed = self._armed.get(endpoint)
        if d is not None and (armed is None or d < armed):
            self._armed[endpoint] = d
            self._push(d, "timer", endpoint)

    def _step(self) -> bool:
        if not self._heap:
            return False
        t, _, kind, data = heapq.heappop(self._heap)
        self.clock = max(self.clock, t)
        if kind == "timer":
            (endpoint,) = data
            if self._armed.get(endpoint) != t:
                return True
            self._armed[endpoint] = None
            if endpoint == BROKER:
                for cid, f in self.broker.poll(self.clock):
                    self._transmit(BROKER, cid, f)
            elif endpoint in self._clients:
                self._clients[endpoint]._on_events(self._clients[endpoint].session.poll(self.clock))
            self._arm(endpoint)
            return True
        src, dst, frame = data
        if dst == BROKER:
            out, hangup = self.broker.handle(src, frame, self.clock)
            for cid, f in out:
                self._transmit(BROKER, cid, f)
                self._arm(BROKER)
            if hangup:
                self.broker.close(src)
            self._arm(BROKER)
        elif dst in self._clients and not self._clients[dst].closed:
            client = self._clients[dst]
            client.stats.wire_received += len(encode(frame))
            client._on_frame(frame)
            self._arm(dst)
        return True

    def step(self) -> bool:
        """Process the next scheduled event; False when nothing is pending."""
        return self._step()

    def run_until(self, done: Callable[[], bool], max_time: float | None = None) -> bool:
        """Process events until ``done()``; False if the network went idle or time ran out."""
        while not done():
            if max_time is not None and self._heap and self._heap[0][0] > max_time:
                return False
            if not self._step():
                return done()
        return True

    def run_until_idle(self) -> None:
        while self._step():
            pass

    # -- clients ----------------------------------------------------------

    def connect(self, client_id: str = "", token: str | None = None) -> "LoopbackClient":
        conn = next(self._next_conn)
        client = LoopbackClient(self, conn, client_id)
        self._clients[conn] = client
        self.broker.open(conn)
        client._send(WireFrame(MsgType.CONNECT, 0, None, (token if token is not None else self.broker.token).encode()))
        self.run_until(lambda: client.connack is not None)
        if client.connack != CONNACK_OK:
            client.closed = True
            raise AuthRejected(f"broker refused connection (code {client.connack:#04x})")
        return client


class LoopbackClient:
    def __init__(self, net: LoopbackNetwork, conn_id: int, client_id: str):
        self.net = net
        self.conn_id = conn_id
        self.client_id = client_id
        self.session = Qos2Session(net.timeout, net.max_retries)
        self.stats = ClientStats()
        self.connack: int | None = None
        self.closed = False
        self.inbox: deque[tuple[str, bytes]] = deque()
        self._handlers: dict[str, Callable[[str, bytes], None] | None] = {}
        self._subacks: set[int] = set()
        self._done: set[int] = set()
        self._failed: set[int] = set()
        self._tokens = itertools.count(1)
        self._sub_ids = itertools.count(1)

    def _send(self, frame: WireFrame) -> None:
        self.net._transmit(self.conn_id, BROKER, frame)

    def _on_events(self, ev: SessionEvents) -> None:
        for f in ev.send:
            self._send(f)
        for topic, payload in ev.delivered:
            if topic not in self._handlers:
                continue
            self.stats.received_messages += 1
            self.stats.received_bytes += len(payload)
            handler = self._handlers[topic]
            if handler is None:
                self.inbox.append((topic, payload))
            else:
                handler(topic, payload)
        self._done.update(ev.completed)
        self._failed.update(ev.failed)

    def _on_frame(self, frame: WireFrame) -> None:
        if frame.msg_type is MsgType.CONNACK:
            self.connack = frame.payload[0] if frame.payload else 0xFF
        elif frame.msg_type is MsgType.SUBACK:
            self._subacks.add(frame.packet_id)
        elif frame.msg_type in FAULTABLE:
            self._on_events(self.session.handle(frame, self.net.clock))

    def _check_open(self) -> None:
        if self.closed:
            raise Disconnected(f"client {self.client_id!r} is closed")

    def subscribe(self, topic: str, handler: Callable[[str, bytes], None] | None = None) -> str:
        """Subscribe; with no handler, messages queue up for :meth:`receive`."""
        self._check_open()
        check_topic(topic)
        sid = next(self._sub_ids)
        self._handlers[topic] = handler
        self._send(WireFrame(MsgType.SUBSCRIBE, sid, topic))
        self.net.run_until(lambda: sid in self._subacks)
        return topic

    def publish(self, topic: str, payload: bytes) -> None:
        """Blocks (drives the simulation) until the broker's PUBCOMP arrives."""
        self._check_open()
        check_topic(topic)
        token = next(self._tokens)
        self._on_events(self.session.publish(topic, payload, token, self.net.clock))
        self.net._arm(self.conn_id)
        self.net.run_until(lambda: token in self._done or token in self._failed)
        if token in self._failed or token not in self._done:
            raise RetryExhausted(f"publish to {topic!r} not acknowledged")
        self._done.discard(token)
        self.stats.published_messages += 1
        self.stats.published_bytes += len(payload)

    def receive(self, timeout: float | None = None) -> tuple[str, bytes] | None:
        """Next queued message, or None if none can arrive within ``timeout`` simulated seconds."""
        self._check_open()
        limit = None if timeout is None else self.net.clock + timeout
        self.net.run_until(lambda: bool(self.inbox), limit)
        return self.inbox.popleft() if self.inbox else None

    @property
    def retransmitted_bytes(self) -> int:
        return self.session.retransmitted_bytes

    def close(self) -> None:
        self.closed = True
        self.net.broker.close(self.conn_id)
