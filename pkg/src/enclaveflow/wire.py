"""Framed push/pull sockets over TCP.

Wire layout of one frame (big-endian)::

    u32 total_length   # 13 + len(payload)
    u32 stream_id
    u64 seq_no
    u8  flags          # 0x01 END_OF_STREAM, 0x02 ENCRYPTED
    ... payload

A push socket load-balances data frames over its peers round-robin and
broadcasts END_OF_STREAM frames. A pull socket merges its upstream
connections with fair queuing and keeps each connection FIFO. Either kind
can bind (accept peers) or connect (dial peers, retrying until they are up).
"""
from __future__ import annotations

import enum
import logging
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Iterable

from . import kernels

log = logging.getLogger(__name__)

HEADER = struct.Struct(">IIQB")
HEADER_BODY_SIZE = 13
MAX_PAYLOAD = 2**32 - HEADER_BODY_SIZE - 1
MAX_STREAM_ID = 2**32 - 1
MAX_SEQ_NO = 2**64 - 1

DEFAULT_CONNECT_TIMEOUT = 30.0
DEFAULT_HWM = 64
_RECV_CHUNK = 256 * 1024


class Flags(enum.IntFlag):
    END_OF_STREAM = 0x01
    ENCRYPTED = 0x02


_KNOWN_FLAGS = int(Flags.END_OF_STREAM | Flags.ENCRYPTED)
_NO_FLAGS = Flags(0)


class WireError(Exception):
    pass


class PayloadTooLarge(WireError):
    pass


class Truncated(WireError):
    pass


class MalformedHeader(WireError):
    pass


class UnknownFlagBits(WireError):
    pass


class NoPeers(WireError):
    pass


class PeerDisconnected(WireError):
    pass


class SocketClosed(WireError):
    pass


class BindAddressInUse(WireError):
    pass


class ConnectTimeout(WireError, TimeoutError):
    pass


class RecvTimeout(WireError, TimeoutError):
    pass


@dataclass(frozen=True, slots=True)
class Frame:
    stream_id: int
    seq_no: int
    flags: Flags = _NO_FLAGS
    payload: bytes = b""

    def __post_init__(self):
        if not 0 <= self.stream_id <= MAX_STREAM_ID:
            raise ValueError(f"stream_id out of range: {self.stream_id}")
        if not 0 <= self.seq_no <= MAX_SEQ_NO:
            raise ValueError(f"seq_no out of range: {self.seq_no}")
        if self.flags & Flags.END_OF_STREAM and self.payload:
            raise ValueError("END_OF_STREAM frame must have an empty payload")

    @property
    def eos(self) -> bool:
        return bool(self.flags & Flags.END_OF_STREAM)

    @property
    def encrypted(self) -> bool:
        return bool(self.flags & Flags.ENCRYPTED)

    @classmethod
    def end_of_stream(cls, stream_id: int, seq_no: int = 0) -> "Frame":
        return cls(stream_id, seq_no, Flags.END_OF_STREAM)


def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {len(frame.payload)} bytes does not fit a frame")
    return HEADER.pack(HEADER_BODY_SIZE + len(frame.payload), frame.stream_id,
                       frame.seq_no, int(frame.flags)) + frame.payload


def _make_frame(sid: int, seq: int, flags: int, payload: bytes) -> Frame:
    if flags & ~_KNOWN_FLAGS:
        raise UnknownFlagBits(f"flag byte {flags:#04x} has undefined bits")
    return Frame(sid, seq, Flags(flags), payload)


def decode_frame_from(data, offset: int = 0) -> tuple[Frame, int]:
    """Decode one frame at ``offset``; return it and the offset after it."""
    if len(data) - offset < 4:
        raise Truncated("fewer than 4 bytes available for the length prefix")
    (total,) = struct.unpack_from(">I", data, offset)
    if total < HEADER_BODY_SIZE:
        raise MalformedHeader(f"declared length {total} < {HEADER_BODY_SIZE}")
    end = offset + 4 + total
    if len(data) < end:
        raise Truncated(f"frame needs {total + 4} bytes, {len(data) - offset} available")
    _, sid, seq, flags = HEADER.unpack_from(data, offset)
    return _make_frame(sid, seq, flags, bytes(data[offset + 17:end])), end


def decode_frame(data) -> Frame:
    return decode_frame_from(data)[0]


@dataclass(frozen=True)
class Endpoint:
    host: str
    port: int

    def __post_init__(self):
        if not 0 < self.port < 65536:
            raise ValueError(f"port must be in 1..65535, got {self.port}")

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        """Parse ``tcp://host:port`` (the scheme is optional)."""
        rest = text.strip()
        if "://" in rest:
            scheme, rest = rest.split("://", 1)
            if scheme != "tcp":
                raise ValueError(f"unsupported transport {scheme!r} in {text!r}")
        host, sep, port = rest.rpartition(":")
        if not sep or not host:
            raise ValueError(f"endpoint {text!r} is not host:port")
        try:
            return cls(host, int(port))
        except ValueError as exc:
            raise ValueError(f"bad endpoint {text!r}: {exc}") from None

    @property
    def bind_host(self) -> str:
        return "0.0.0.0" if self.host == "*" else self.host

    def __str__(self) -> str:
        return f"tcp://{self.host}:{self.port}"


def _listen(endpoint: Endpoint) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        srv.bind((endpoint.bind_host, endpoint.port))
    except OSError as exc:
        srv.close()
        raise BindAddressInUse(f"{endpoint}: {exc.strerror}") from None
    srv.listen(128)
    return srv


def _dial(endpoint: Endpoint, deadline: float) -> socket.socket:
    delay = 0.01
    while True:
        try:
            sock = socket.create_connection((endpoint.host, endpoint.port), timeout=5.0)
        except OSError as exc:
            if time.monotonic() + delay > deadline:
                raise ConnectTimeout(f"could not reach {endpoint}: {exc}") from None
            time.sleep(delay)
            delay = min(delay * 2, 0.5)
            continue
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock


def _accept_loop(srv: socket.socket, on_conn, closed: threading.Event):
    while not closed.is_set():
        try:
            conn, _ = srv.accept()
        except OSError:
            return
        if closed.is_set():
            conn.close()
            return
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        on_conn(conn)


def _spawn(target, *args, name: str) -> threading.Thread:
    t = threading.Thread(target=target, args=args, name=name, daemon=True)
    t.start()
    return t


class _Peer:
    """One downstream connection of a push socket.

    ``transport`` needs only ``sendall``; real sockets also get a watcher that
    notices when the peer half-closes to leave the rotation.
    """

    __slots__ = ("transport", "lock", "gone")

    def __init__(self, transport):
        self.transport = transport
        self.lock = threading.Lock()
        self.gone = False


class PushSocket:
    """Outbound queue: round-robin data, broadcast END_OF_STREAM."""

    def __init__(self):
        self.peers: list[_Peer] = []
        self.rr_counter = 0
        self._cond = threading.Condition()
        self._closed = threading.Event()
        self._listener: socket.socket | None = None
        self.frames_sent = 0
        self.bytes_sent = 0

    # -- peer management -------------------------------------------------
    def attach(self, transport) -> None:
        """Add a peer at the end of the rotation (connection order)."""
        peer = _Peer(transport)
        with self._cond:
            if self._closed.is_set():
                raise SocketClosed("push socket is closed")
            self.peers.append(peer)
            self._cond.notify_all()
        if isinstance(transport, socket.socket):
            _spawn(self._watch, peer, name="push-watch")

    def _watch(self, peer: _Peer) -> None:
        # Pull peers never send; EOF or error here means the peer is leaving.
        try:
            while peer.transport.recv(4096):
                pass
        except OSError:
            pass
        self._drop(peer, graceful=True)

    def _drop(self, peer: _Peer, graceful: bool) -> None:
        with self._cond:
            if peer in self.peers:
                self.peers.remove(peer)
        with peer.lock:
            if peer.gone:
                return
            peer.gone = True
            if isinstance(peer.transport, socket.socket):
                try:
                    # After the rotation no longer includes it, let the
                    # peer drain what was already written and then see EOF.
                    peer.transport.shutdown(socket.SHUT_WR if graceful else socket.SHUT_RDWR)
                except OSError:
                    pass

    @property
    def peer_count(self) -> int:
        with self._cond:
            return len(self.peers)

    def wait_for_peers(self, count: int = 1, timeout: float | None = None) -> bool:
        with self._cond:
            return self._cond.wait_for(
                lambda: len(self.peers) >= count or self._closed.is_set(), timeout)

    # -- sending ---------------------------------------------------------
    def _deliver(self, peer: _Peer, data: bytes) -> bool:
        with peer.lock:
            if peer.gone:
                return False
            try:
                peer.transport.sendall(data)
                return True
            except OSError:
                pass
        self._drop(peer, graceful=False)
        return False

    def _next_peer(self, wait: float | None) -> _Peer:
        with self._cond:
            if not self.peers and wait:
                self._cond.wait_for(lambda: self.peers or self._closed.is_set(), wait)
            if self._closed.is_set():
                raise SocketClosed("push socket is closed")
            if not self.peers:
                raise NoPeers("no connected downstream peers")
            peer = self.peers[self.rr_counter % len(self.peers)]
            self.rr_counter += 1
            return peer

    def send(self, frame: Frame, wait: float | None = None) -> None:
        """Send one frame.

        Data frames go to ``peers[rr_counter % n]``. A peer whose connection
        fails is removed and the frame goes to the next peer in rotation.
        ``wait`` bounds how long to wait for a first peer before NoPeers.
        """
        data = encode_frame(frame)
        if frame.eos:
            self._broadcast(data, wait)
            return
        while True:
            peer = self._next_peer(wait)
            if self._deliver(peer, data):
                break
            log.warning("downstream peer disconnected; redelivering frame")
        self.frames_sent += 1
        self.bytes_sent += len(frame.payload)

    def _broadcast(self, data: bytes, wait: float | None) -> None:
        with self._cond:
            if not self.peers and wait:
                self._cond.wait_for(lambda: self.peers or self._closed.is_set(), wait)
            if not self.peers:
                raise NoPeers("no connected downstream peers")
            targets = list(self.peers)
        for peer in targets:
            self._deliver(peer, data)

    def close(self) -> None:
        """Stop accepting peers and half-close every connection."""
        self._closed.set()
        if self._listener is not None:
            try:
                # shutdown wakes a thread blocked in accept(); close alone does not.
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._listener.close()
            except OSError:
                pass
        with self._cond:
            peers, self.peers = self.peers, []
            self._cond.notify_all()
        for peer in peers:
            with peer.lock:
                peer.gone = True
                if isinstance(peer.transport, socket.socket):
                    try:
                        peer.transport.shutdown(socket.SHUT_WR)
                    except OSError:
                        pass
                    peer.transport.close()
                elif hasattr(peer.transport, "close"):
                    peer.transport.close()


class FairQueue:
    """Per-upstream FIFO lanes served in rotation.

    ``cursor`` is the index of the last lane served (-1 before the first
    delivery); the next pop starts searching at ``cursor + 1``.
    """

    def __init__(self):
        self.lanes: list[deque] = []
        self.cursor = -1

    def add_lane(self) -> deque:
        lane = deque()
        self.lanes.append(lane)
        return lane

    def remove_lane(self, lane: deque) -> None:
        # Deques compare by content, so look the lane up by identity.
        i = next(k for k, existing in enumerate(self.lanes) if existing is lane)
        del self.lanes[i]
        if i <= self.cursor:
            self.cursor -= 1

    def pending(self) -> int:
        return sum(len(lane) for lane in self.lanes)

    def pop(self):
        """Return ``(lane, item)`` from the next non-empty lane, or None."""
        n = len(self.lanes)
        for step in range(1, n + 1):
            i = (self.cursor + step) % n
            lane = self.lanes[i]
            if lane:
                self.cursor = i
                return lane, lane.popleft()
        return None


@dataclass(frozen=True)
class UpstreamClosed:
    """Marker delivered after the last frame of a finished upstream connection."""

    had_eos: bool
    frames: int


class _Inbound:
    __slots__ = ("sock", "lane", "eos_seen", "frames", "finished")

    def __init__(self, sock, lane):
        self.sock = sock
        self.lane = lane
        self.eos_seen = False
        self.frames = 0
        self.finished = False


class PullSocket:
    """Inbound queue: fair-queued merge of FIFO upstream connections."""

    def __init__(self, hwm: int = DEFAULT_HWM):
        self.hwm = hwm
        self.fq = FairQueue()
        self._cond = threading.Condition()
        self._closed = threading.Event()
        self._listener: socket.socket | None = None
        self._inbound: dict[int, _Inbound] = {}
        self.connections_seen = 0

    @property
    def fq_cursor(self) -> int:
        return self.fq.cursor

    @property
    def open_connections(self) -> int:
        with self._cond:
            return sum(1 for c in self._inbound.values() if not c.finished)

    def attach(self, sock: socket.socket) -> None:
        with self._cond:
            if self._closed.is_set():
                sock.close()
                return
            lane = self.fq.add_lane()
            conn = _Inbound(sock, lane)
            self._inbound[id(lane)] = conn
            self.connections_seen += 1
        _spawn(self._read, conn, name="pull-read")

    def _read(self, conn: _Inbound) -> None:
        buf = bytearray()
        try:
            while True:
                chunk = conn.sock.recv(_RECV_CHUNK)
                if not chunk:
                    break
                buf += chunk
                try:
                    raw, end = kernels.split_frames(buf)
                    frames = [_make_frame(*r) for r in raw]
                except (ValueError, WireError) as exc:
                    log.error("dropping upstream connection: %s", exc)
                    break
                if end:
                    del buf[:end]
                if frames:
                    self._enqueue(conn, frames)
        except OSError:
            pass
        if buf:
            log.warning("upstream closed with %d bytes of a partial frame", len(buf))
        with self._cond:
            conn.lane.append(UpstreamClosed(conn.eos_seen, conn.frames))
            self._cond.notify_all()

    def _enqueue(self, conn: _Inbound, frames: list[Frame]) -> None:
        with self._cond:
            for f in frames:
                if f.eos:
                    conn.eos_seen = True
                conn.frames += 1
                conn.lane.append(f)
            self._cond.notify_all()
            # High-water mark: stop reading so TCP pushes back on the sender.
            self._cond.wait_for(
                lambda: len(conn.lane) < self.hwm or self._closed.is_set())

    def recv_event(self, timeout: float | None = None):
        """Next Frame, or an UpstreamClosed marker when a connection ends."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                if self._closed.is_set():
                    raise SocketClosed("pull socket is closed")
                got = self.fq.pop()
                if got is not None:
                    lane, item = got
                    if isinstance(item, UpstreamClosed):
                        conn = self._inbound.pop(id(lane))
                        conn.finished = True
                        self.fq.remove_lane(lane)
                        try:
                            conn.sock.close()
                        except OSError:
                            pass
                    self._cond.notify_all()
                    return item
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise RecvTimeout("no frame within timeout")
                self._cond.wait(remaining)

    def recv(self, timeout: float | None = None) -> Frame:
        """Block until a frame is available (connection-close markers skipped)."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            item = self.recv_event(remaining)
            if isinstance(item, Frame):
                return item

    def leave(self) -> None:
        """Tell every upstream we are leaving; keep reading until they close."""
        with self._cond:
            conns = list(self._inbound.values())
        for c in conns:
            try:
                c.sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass

    def close(self) -> None:
        self._closed.set()
        if self._listener is not None:
            try:
                # shutdown wakes a thread blocked in accept(); close alone does not.
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._listener.close()
            except OSError:
                pass
        with self._cond:
            conns = list(self._inbound.values())
            self._cond.notify_all()
        for c in conns:
            try:
                c.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            c.sock.close()


def bind_pull(endpoint: Endpoint, hwm: int = DEFAULT_HWM) -> PullSocket:
    sock = PullSocket(hwm)
    sock._listener = _listen(endpoint)
    _spawn(_accept_loop, sock._listener, sock.attach, sock._closed, name="pull-accept")
    return sock


def connect_pull(endpoints: Iterable[Endpoint], timeout: float = DEFAULT_CONNECT_TIMEOUT,
                 hwm: int = DEFAULT_HWM) -> PullSocket:
    sock = PullSocket(hwm)
    deadline = time.monotonic() + timeout
    for ep in endpoints:
        sock.attach(_dial(ep, deadline))
    return sock


def bind_push(endpoint: Endpoint) -> PushSocket:
    sock = PushSocket()
    sock._listener = _listen(endpoint)
    _spawn(_accept_loop, sock._listener, sock.attach, sock._closed, name="push-accept")
    return sock


def connect_push(endpoints: Iterable[Endpoint],
                 timeout: float = DEFAULT_CONNECT_TIMEOUT) -> PushSocket:
    """Dial every endpoint in order, retrying with backoff until ``timeout``."""
    sock = PushSocket()
    deadline = time.monotonic() + timeout
    for ep in endpoints:
        sock.attach(_dial(ep, deadline))
    return sock


def push_send(sock: PushSocket, frame: Frame) -> None:
    sock.send(frame)


def pull_recv(sock: PullSocket, timeout: float | None = None) -> Frame:
    return sock.recv(timeout)
