"""Threaded TCP broker and client speaking the same frames as the loopback network."""

from __future__ import annotations

import itertools
import logging
import queue
import socket
import threading
import time
from typing import Callable

from ..errors import AuthRejected, BindFailure, Disconnected, MalformedFrame, RetryExhausted
from .broker import BrokerCore
from .loopback import ClientStats
from .session import Qos2Session, SessionEvents
from .wire import CONNACK_OK, FrameReader, MsgType, WireFrame, check_topic, encode

log = logging.getLogger(__name__)

TICK = 0.05


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


class BrokerServer:
    def __init__(self, bind: str, token: str, timeout: float = 1.0, max_retries: int = 10):
        self.bind = parse_address(bind)
        self.core = BrokerCore(token, timeout, max_retries)
        self._lock = threading.Lock()
        self._socks: dict[int, socket.socket] = {}
        self._ids = itertools.count(1)
        self._stop = threading.Event()
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def start(self) -> "BrokerServer":
        try:
            self._listener = socket.create_server(self.bind)
        except OSError as exc:
            raise BindFailure(f"cannot bind {self.bind[0]}:{self.bind[1]}: {exc}") from None
        self._listener.settimeout(TICK)
        for target in (self._accept_loop, self._timer_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def serve_forever(self) -> None:
        if self._listener is None:
            self.start()
        try:
            while not self._stop.is_set():
                time.sleep(0.2)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def stop(self) -> None:
        self._stop.set()
        if self._listener is not None:
            self._listener.close()
        with self._lock:
            for s in self._socks.values():
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                s.close()
            self._socks.clear()

    def __enter__(self) -> "BrokerServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _send(self, out) -> None:
        for cid, frame in out:
            sock = self._socks.get(cid)
            if sock is None:
                continue
            try:
                sock.sendall(encode(frame))
            except OSError:
                self._drop(cid)

    def _drop(self, cid: int) -> None:
        self.core.close(cid)
        sock = self._socks.pop(cid, None)
        if sock is not None:
            sock.close()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            cid = next(self._ids)
            with self._lock:
                self._socks[cid] = sock
                self.core.open(cid)
            threading.Thread(target=self._conn_loop, args=(cid, sock), daemon=True).start()

    def _conn_loop(self, cid: int, sock: socket.socket) -> None:
        reader = FrameReader()
        while not self._stop.is_set():
            try:
                data = sock.recv(65536)
                frames = reader.feed(data) if data else None
            except (OSError, MalformedFrame) as exc:
                log.info("connection %d closed: %s", cid, exc)
                frames = None
            if not frames:
                if frames is None:
                    with self._lock:
                        self._drop(cid)
                    return
                continue
            with self._lock:
                for frame in frames:
                    out, hangup = self.core.handle(cid, frame, time.monotonic())
                    self._send(out)
                    if hangup:
                        self._drop(cid)
                        return

    def _timer_loop(self) -> None:
        while not self._stop.wait(TICK):
            with self._lock:
                self._send(self.core.poll(time.monotonic()))


class TcpClient:
    """Blocking client: ``publish`` returns once the broker's PUBCOMP arrives.

    Subscription handlers run on a dedicated dispatch thread so a slow handler
    never stalls the handshake traffic.
    """

    def __init__(
        self,
        address: str | tuple[str, int],
        token: str,
        client_id: str = "",
        timeout: float = 1.0,
        max_retries: int = 10,
        connect_timeout: float = 5.0,
    ):
        host, port = parse_address(address) if isinstance(address, str) else address
        self.client_id = client_id
        self.session = Qos2Session(timeout, max_retries)
        self.stats = ClientStats()
        self.inbox: queue.Queue[tuple[str, bytes]] = queue.Queue()
        self.closed = False
        self._cond = threading.Condition()
        self._done: set[int] = set()
        self._failed: set[int] = set()
        self._subacks: set[int] = set()
        self._connack: int | None = None
        self._handlers: dict[str, Callable[[str, bytes], None] | None] = {}
        self._tokens = itertools.count(1)
        self._sub_ids = itertools.count(1)
        self._dispatch_q: queue.Queue = queue.Queue()
        try:
            self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as exc:
            raise Disconnected(f"cannot reach broker at {host}:{port}: {exc}") from None
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._send_lock = threading.Lock()
        for target in (self._read_loop, self._timer_loop, self._dispatch_loop):
            threading.Thread(target=target, daemon=True).start()
        self._send(WireFrame(MsgType.CONNECT, 0, None, token.encode("utf-8")))
        with self._cond:
            if not self._cond.wait_for(lambda: self._connack is not None or self.closed, connect_timeout):
                self.close()
                raise Disconnected("no CONNACK from broker")
        if self._connack != CONNACK_OK:
            self.close()
            raise AuthRejected(f"broker refused connection (code {self._connack:#04x})")

    def _send(self, frame: WireFrame) -> None:
        data = encode(frame)
        try:
            with self._send_lock:
                self._sock.sendall(data)
        except OSError as exc:
            self.closed = True
            raise Disconnected(str(exc)) from None
        self.stats.wire_sent += len(data)

    def _apply(self, ev: SessionEvents) -> None:
        for f in ev.send:
            self._send(f)
        for topic, payload in ev.delivered:
            if topic not in self._handlers:
                continue
            self.stats.received_messages += 1
            self.stats.received_bytes += len(payload)
            handler = self._handlers[topic]
            if handler is None:
                self.inbox.put((topic, payload))
            else:
                self._dispatch_q.put((handler, topic, payload))
        if ev.completed or ev.failed:
            self._done.update(ev.completed)
            self._failed.update(ev.failed)
            self._cond.notify_all()

    def _read_loop(self) -> None:
        reader = FrameReader()
        while True:
            try:
                data = self._sock.recv(65536)
            except OSError:
                data = b""
            if not data:
                break
            self.stats.wire_received += len(data)
            try:
                frames = reader.feed(data)
            except MalformedFrame:
                break
            with self._cond:
                for frame in frames:
                    t = frame.msg_type
                    if t is MsgType.CONNACK:
                        self._connack = frame.payload[0] if frame.payload else 0xFF
                        self._cond.notify_all()
                    elif t is MsgType.SUBACK:
                        self._subacks.add(frame.packet_id)
                        self._cond.notify_all()
                    elif t in (MsgType.PUBLISH, MsgType.PUBREC, MsgType.PUBREL, MsgType.PUBCOMP):
                        try:
                            self._apply(self.session.handle(frame, time.monotonic()))
                        except Disconnected:
                            break
        with self._cond:
            self.closed = True
            self._cond.notify_all()

    def _timer_loop(self) -> None:
        while not self.closed:
            time.sleep(TICK)
            with self._cond:
                try:
                    self._apply(self.session.poll(time.monotonic()))
                except Disconnected:
                    return

    def _dispatch_loop(self) -> None:
        while True:
            item = self._dispatch_q.get()
            if item is None:
                return
            handler, topic, payload = item
            try:
                handler(topic, payload)
            except Exception:  # a failing handler must not kill dispatch
                log.exception("subscription handler for %s failed", topic)

    def subscribe(self, topic: str, handler: Callable[[str, bytes], None] | None = None, timeout: float = 5.0) -> str:
        check_topic(topic)
        if self.closed:
            raise Disconnected("client closed")
        sid = next(self._sub_ids)
        with self._cond:
            self._handlers[topic] = handler
        self._send(WireFrame(MsgType.SUBSCRIBE, sid, topic))
        with self._cond:
            if not self._cond.wait_for(lambda: sid in self._subacks or self.closed, timeout):
                raise Disconnected("no SUBACK from broker")
        if self.closed:
            raise Disconnected("connection lost while subscribing")
        return topic

    def publish(self, topic: str, payload: bytes) -> None:
        check_topic(topic)
        token = next(self._tokens)
        with self._cond:
            if self.closed:
                raise Disconnected("client closed")
            self._apply(self.session.publish(topic, payload, token, time.monotonic()))
            self._cond.wait_for(lambda: token in self._done or token in self._failed or self.closed)
            if token in self._failed:
                raise RetryExhausted(f"publish to {topic!r} not acknowledged")
            if token not in self._done:
                raise Disconnected("connection lost during publish")
            self._done.discard(token)
        self.stats.published_messages += 1
        self.stats.published_bytes += len(payload)

    def receive(self, timeout: float | None = None) -> tuple[str, bytes] | None:
        try:
            return self.inbox.get(timeout=timeout)
        except queue.Empty:
            return None

    @property
    def retransmitted_bytes(self) -> int:
        return self.session.retransmitted_bytes

    def close(self) -> None:
        self.closed = True
        self._dispatch_q.put(None)
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
