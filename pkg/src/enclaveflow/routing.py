"""Router: a broker stage pulling from upstream workers and pushing downstream.

Routers bind both sockets; workers connect to them. Payloads are forwarded
untouched, so a router never needs keys.

Completion: an upstream is *complete* when its connection delivers at least
one END_OF_STREAM frame and then closes, and *retired* when it closes without
one (a worker scaled away after draining). The router finishes once
``expected_upstreams`` upstreams have completed or retired and no upstream
connection is still open. It then broadcasts one END_OF_STREAM per stream id
it saw and half-closes every downstream connection.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .wire import (
    Endpoint,
    Frame,
    PullSocket,
    PushSocket,
    RecvTimeout,
    SocketClosed,
    UpstreamClosed,
    bind_pull,
    bind_push,
)

log = logging.getLogger(__name__)

_POLL = 0.25


class StalledStream(Exception):
    pass


@dataclass(frozen=True)
class RouterConfig:
    inbound: Endpoint
    outbound: Endpoint
    name: str = "router"

    def __post_init__(self):
        if self.inbound == self.outbound:
            raise ValueError("router inbound and outbound endpoints must differ")


@dataclass
class RouterState:
    eos_counts: dict[int, int] = field(default_factory=dict)
    eos_seq: dict[int, int] = field(default_factory=dict)
    completed_upstreams: int = 0
    retired_upstreams: int = 0
    forwarded_frames: int = 0
    forwarded_bytes: int = 0

    def upstream_open_count(self, stream_id: int, expected: int) -> int:
        return max(0, expected - self.eos_counts.get(stream_id, 0))


@dataclass
class RouterReport:
    name: str
    frames: int
    bytes: int
    duration: float
    completed_upstreams: int
    retired_upstreams: int
    eos_streams: list[int]
    aborted: bool = False

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class Router:
    def __init__(self, config: RouterConfig, expected_upstreams: int, *,
                 idle_timeout: float | None = None, peer_wait: float = 30.0,
                 meter=None, progress=None, stop=None):
        if expected_upstreams < 1:
            raise ValueError("expected_upstreams must be >= 1")
        self.config = config
        self.expected_upstreams = expected_upstreams
        self.idle_timeout = idle_timeout
        self.peer_wait = peer_wait
        self.meter = meter
        self.progress = progress
        self.stop = stop
        self.state = RouterState()
        self.pull: PullSocket | None = None
        self.push: PushSocket | None = None

    def bind(self) -> "Router":
        self.pull = bind_pull(self.config.inbound)
        try:
            self.push = bind_push(self.config.outbound)
        except Exception:
            self.pull.close()
            raise
        return self

    def _finished(self) -> bool:
        s = self.state
        return (s.completed_upstreams + s.retired_upstreams >= self.expected_upstreams
                and self.pull.open_connections == 0)

    def run(self) -> RouterReport:
        if self.pull is None:
            self.bind()
        start = time.monotonic()
        last_event = start
        s = self.state
        aborted = False
        try:
            while True:
                if self.stop is not None and self.stop.is_set():
                    aborted = True
                    break
                try:
                    item = self.pull.recv_event(timeout=_POLL)
                except RecvTimeout:
                    if self.idle_timeout and time.monotonic() - last_event > self.idle_timeout:
                        raise StalledStream(
                            f"{self.config.name}: no frame for {self.idle_timeout:.1f}s") from None
                    continue
                last_event = time.monotonic()
                if isinstance(item, UpstreamClosed):
                    if item.had_eos:
                        s.completed_upstreams += 1
                    else:
                        s.retired_upstreams += 1
                    if self._finished():
                        break
                    continue
                if item.eos:
                    sid = item.stream_id
                    s.eos_counts[sid] = s.eos_counts.get(sid, 0) + 1
                    s.eos_seq[sid] = max(s.eos_seq.get(sid, 0), item.seq_no)
                    continue
                self._forward(item)
            if not aborted:
                for sid in sorted(s.eos_counts):
                    self.push.send(Frame.end_of_stream(sid, s.eos_seq[sid]), wait=self.peer_wait)
        except SocketClosed:
            aborted = True
        finally:
            self.close()
        return RouterReport(self.config.name, s.forwarded_frames, s.forwarded_bytes,
                            time.monotonic() - start, s.completed_upstreams,
                            s.retired_upstreams, sorted(s.eos_counts), aborted)

    def _forward(self, frame: Frame) -> None:
        p = self.progress
        if p is not None:
            p.busy = 1
        self.push.send(frame, wait=self.peer_wait)
        self.state.forwarded_frames += 1
        self.state.forwarded_bytes += len(frame.payload)
        if self.meter is not None:
            self.meter.add(len(frame.payload))
        if p is not None:
            p.frames += 1
            p.busy = 0

    def close(self) -> None:
        if self.push is not None:
            self.push.close()
        if self.pull is not None:
            self.pull.close()
        if self.meter is not None:
            self.meter.close()


def run_router(config: RouterConfig, expected_upstreams: int, **kwargs) -> RouterReport:
    """Bind, forward until every expected upstream is done, then return a report."""
    return Router(config, expected_upstreams, **kwargs).bind().run()
