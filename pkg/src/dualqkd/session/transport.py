"""Transports that carry frames between two endpoints.

Both transports route every frame through a :class:`Middlebox`, which
holds the quantum channel (applied to PULSE frames) and the optional
adversary (applied to everything else).  ``in_process`` is a
single-threaded FIFO driver; ``socket`` runs each endpoint in its own
thread and connects them over TCP loopback through a relay thread.
"""

from __future__ import annotations

import selectors
import socket
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..channel import ChannelParams, transmit_train
from . import wire
from .wire import MsgType


class TransportError(Exception):
    """Harness failure: stalled session, closed connection, bad frame."""


@dataclass
class Middlebox:
    params: ChannelParams
    rng: np.random.Generator
    eve: Optional[object] = None

    def process(self, direction: str, frame: bytes) -> bytes:
        kind, body = wire.decode_frame(frame)
        if kind == MsgType.PULSE:
            phase, train = wire.decode_pulses(body, self.params.pulse_model)
            out = transmit_train(train, self.params, self.eve, self.rng, direction=direction, phase=phase)
            return wire.encode_frame(kind, wire.encode_pulses(out, phase))
        if self.eve is not None:
            new = self.eve.on_message(direction, kind.name, body)
            if new != body:
                return wire.encode_frame(kind, new)
        return frame


@dataclass
class Transcript:
    entries: list = field(default_factory=list)

    def add(self, direction: str, frame: bytes):
        kind, _ = wire.decode_frame(frame)
        self.entries.append((direction, kind.name, frame))

    def kinds(self) -> list:
        return [k for _, k, _ in self.entries]

    def __len__(self):
        return len(self.entries)


def _other(direction: str) -> str:
    return "B2A" if direction == "A2B" else "A2B"


def run_in_process(alice, bob, middlebox: Middlebox, max_frames: int = 1_000_000) -> Transcript:
    transcript = Transcript()
    queue = deque(("A2B", f) for f in alice.start())
    while queue:
        if len(transcript) >= max_frames:
            raise TransportError("frame budget exceeded")
        direction, frame = queue.popleft()
        frame = middlebox.process(direction, frame)
        transcript.add(direction, frame)
        receiver = bob if direction == "A2B" else alice
        if receiver.done:
            continue
        queue.extend((_other(direction), f) for f in receiver.receive(frame))
    if not (alice.done and bob.done):
        raise TransportError(
            f"session stalled: A in {alice.state.value}, B in {bob.state.value}")
    return transcript


class FramedSocket:
    """Blocking frame I/O over a stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.reader = wire.FrameReader()
        self._ready: deque = deque()

    def send_frame(self, frame: bytes):
        self.sock.sendall(frame)

    def recv_frame(self) -> Optional[bytes]:
        """Next frame, or ``None`` once the peer has closed the connection."""
        while not self._ready:
            data = self.sock.recv(65536)
            if not data:
                return None
            self._ready.extend(self.reader.feed(data))
        return self._ready.popleft()

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def _endpoint_loop(endpoint, conn: FramedSocket, errors: list, initial: list):
    try:
        for f in initial:
            conn.send_frame(f)
        while not endpoint.done:
            frame = conn.recv_frame()
            if frame is None:
                raise TransportError(f"connection closed while {endpoint.role} in {endpoint.state.value}")
            for f in endpoint.receive(frame):
                conn.send_frame(f)
    except BaseException as exc:  # surfaced in the driving thread
        errors.append(exc)
    finally:
        conn.close()


class Relay:
    """Accepts one connection per side and forwards frames through a middlebox."""

    def __init__(self, middlebox: Middlebox, host: str = "127.0.0.1", timeout: float = 60.0):
        self.middlebox = middlebox
        self.transcript = Transcript()
        self.timeout = timeout
        self.errors: list = []
        self._listeners = {}
        for side in ("A", "B"):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            s.bind((host, 0))
            s.listen(1)
            s.settimeout(timeout)
            self._listeners[side] = s
        self.addresses = {side: s.getsockname() for side, s in self._listeners.items()}
        self._thread = threading.Thread(target=self._run, daemon=True)

    def start(self):
        self._thread.start()

    def join(self):
        self._thread.join(self.timeout)

    def _run(self):
        conns = {}
        try:
            for side, s in self._listeners.items():
                c, _ = s.accept()
                c.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                conns[side] = c
            readers = {side: wire.FrameReader() for side in conns}
            sel = selectors.DefaultSelector()
            for side, c in conns.items():
                sel.register(c, selectors.EVENT_READ, side)
            open_sides = set(conns)
            while open_sides:
                events = sel.select(self.timeout)
                if not events:
                    raise TransportError("relay timed out")
                for key, _ in events:
                    side = key.data
                    data = key.fileobj.recv(65536)
                    if not data:
                        sel.unregister(key.fileobj)
                        open_sides.discard(side)
                        continue
                    direction = "A2B" if side == "A" else "B2A"
                    dest = conns["B" if side == "A" else "A"]
                    for frame in readers[side].feed(data):
                        frame = self.middlebox.process(direction, frame)
                        self.transcript.add(direction, frame)
                        try:
                            dest.sendall(frame)
                        except OSError:
                            pass  # receiver already finished
        except BaseException as exc:
            self.errors.append(exc)
        finally:
            for c in conns.values():
                c.close()
            for s in self._listeners.values():
                s.close()


def connect(address, timeout: float = 60.0) -> FramedSocket:
    s = socket.create_connection(address, timeout=timeout)
    s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return FramedSocket(s)


def run_socket(alice, bob, middlebox: Middlebox, timeout: float = 60.0) -> Transcript:
    relay = Relay(middlebox, timeout=timeout)
    relay.start()
    errors: list = []
    conn_a = connect(relay.addresses["A"], timeout)
    conn_b = connect(relay.addresses["B"], timeout)
    threads = [
        threading.Thread(target=_endpoint_loop, args=(bob, conn_b, errors, []), daemon=True),
        threading.Thread(target=_endpoint_loop, args=(alice, conn_a, errors, alice.start()), daemon=True),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
    relay.join()
    if errors or relay.errors:
        exc = (errors + relay.errors)[0]
        if isinstance(exc, TransportError):
            raise exc
        raise TransportError(f"socket session failed: {exc!r}") from exc
    if not (alice.done and bob.done):
        raise TransportError("socket session did not finish")
    return relay.transcript


TRANSPORTS = {"inproc": run_in_process, "socket": run_socket}
