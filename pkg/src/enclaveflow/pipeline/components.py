"""Component bodies: source, worker, sink and router.

Each body runs in a thread or a forked process and talks to the launcher
through a status queue: ``("live", name)`` once its sockets are up, then
either ``("done", name, report)`` or ``("failed", name, message)``.
"""
from __future__ import annotations

import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..enclave import (
    STATE_STREAM,
    CostModel,
    EnclaveConfig,
    SealedBlob,
    create_enclave,
    seal,
    unseal,
)
from ..routing import Router, RouterConfig
from ..transforms import Registry, apply_transform
from ..wire import (
    Endpoint,
    Flags,
    Frame,
    RecvTimeout,
    SocketClosed,
    UpstreamClosed,
    connect_pull,
    connect_push,
)
from .config import Mode, Role

_POLL = 0.25


class Progress:
    """Frames handled and a busy flag, shareable across processes."""

    def __init__(self, ctx=None):
        if ctx is None:
            self._frames, self._busy = [0], [0]
        else:
            self._frames = ctx.Value("q", 0, lock=False)
            self._busy = ctx.Value("b", 0, lock=False)

    def _get(self, box):
        return box[0] if isinstance(box, list) else box.value

    def _set(self, box, value):
        if isinstance(box, list):
            box[0] = value
        else:
            box.value = value

    frames = property(lambda self: self._get(self._frames),
                      lambda self, v: self._set(self._frames, v))
    busy = property(lambda self: self._get(self._busy),
                    lambda self, v: self._set(self._busy, v))


@dataclass
class ComponentEnv:
    name: str
    stage: str
    role: Role
    index: int
    uid: int
    status: Any
    stop: Any
    retire: Any
    progress: Progress
    mode: Mode
    key: bytes | None
    t0: float
    registry: Registry
    stats_dir: Path | None = None
    inbound: Endpoint | None = None
    outbound: Endpoint | None = None
    transform: str | None = None
    partitions: int = 1
    data_file: str | None = None
    chunk_records: int = 2048
    expected_upstreams: int = 1
    cost: CostModel | None = None
    realistic_delay: bool = False
    hooks: dict = field(default_factory=dict)

    def meter(self):
        if self.stats_dir is None:
            return None
        from ..bench.metrics import ThroughputMeter
        return ThroughputMeter(Path(self.stats_dir) / f"{self.name}.csv", self.name, self.t0)


def run_component(env: ComponentEnv) -> None:
    """Entry point for threads and processes alike."""
    body = {Role.SOURCE: _source, Role.ROUTER: _router,
            Role.WORKER: _worker, Role.SINK: _worker}[env.role]
    try:
        report = body(env)
    except BaseException as exc:  # noqa: BLE001 - reported to the launcher
        env.status.put(("failed", env.name, f"{type(exc).__name__}: {exc}",
                        traceback.format_exc(limit=4)))
        return
    env.status.put(("done", env.name, report))


def _read_partition(path: str, index: int, parts: int) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    # A first line without any digit is a header row.
    if lines and not any(ch.isdigit() for ch in lines[0]):
        lines = lines[1:]
    lines = [ln for ln in lines if ln.strip()]
    n = len(lines)
    return lines[index * n // parts:(index + 1) * n // parts]


def _source(env: ComponentEnv) -> dict:
    rows = _read_partition(env.data_file, env.index, env.partitions)
    push = connect_push([env.outbound])
    meter = env.meter()
    env.status.put(("live", env.name))
    sid, seq, sent_bytes = env.index, 0, 0
    encrypt = env.mode is not Mode.CLEAR
    pace = env.hooks.get("source_interval", 0.0)
    try:
        for start in range(0, len(rows), env.chunk_records):
            if env.stop.is_set():
                return {"aborted": True}
            payload = "\n".join(rows[start:start + env.chunk_records]).encode()
            flags = Flags(0)
            if encrypt:
                payload = seal(env.key, payload, sid, seq).to_bytes()
                flags = Flags.ENCRYPTED
            push.send(Frame(sid, seq, flags, payload))
            sent_bytes += len(payload)
            if meter:
                meter.add(len(payload))
            env.progress.frames += 1
            seq += 1
            if pace:
                time.sleep(pace)
        push.send(Frame.end_of_stream(sid, seq))
    finally:
        push.close()
        if meter:
            meter.close()
    return {"frames_out": seq, "bytes_out": sent_bytes, "records_out": len(rows),
            "encrypt_ops": seq if encrypt else 0, "stream_id": sid}


def _router(env: ComponentEnv) -> dict:
    router = Router(RouterConfig(env.inbound, env.outbound, env.name), env.expected_upstreams,
                    meter=env.meter(), progress=env.progress, stop=env.stop)
    router.bind()
    env.status.put(("live", env.name))
    return router.run().as_dict()


class _Processor:
    """Applies one stage's transform to a frame according to the run mode."""

    def __init__(self, env: ComponentEnv):
        self.env = env
        self.tdef = env.registry.get(env.transform) if env.transform else None
        self.session = None
        self.handle = None
        self.state = self.tdef.init() if self.tdef else None
        self.encrypt_ops = self.decrypt_ops = 0
        self.records_in = self.records_out = 0
        if self.tdef and env.mode is Mode.ENCLAVE:
            cfg = EnclaveConfig(env.key, cost=env.cost or CostModel(),
                                realistic_delay=env.realistic_delay)
            self.session = create_enclave(cfg, env.registry)

    def process(self, frame: Frame) -> bytes:
        env, tdef = self.env, self.tdef
        sid, seq = frame.stream_id, frame.seq_no
        if env.mode is Mode.ENCLAVE:
            blob, self.handle = self.session.sgxprocess(
                tdef.name, SealedBlob.from_bytes(frame.payload), self.handle, sid, seq)
            return blob.to_bytes()
        payload = frame.payload
        if env.mode is Mode.ENCRYPTED:
            payload = unseal(env.key, SealedBlob.from_bytes(payload), sid, seq)
            self.decrypt_ops += 1
        applied = apply_transform(tdef, self.state, payload)
        self.state = applied.state
        self.records_in += applied.records_in
        self.records_out += applied.records_out
        out = applied.payload
        if env.mode is Mode.ENCRYPTED:
            out = seal(env.key, out, sid, seq).to_bytes()
            self.encrypt_ops += 1
        return out

    def export_state(self) -> dict:
        if self.tdef is None:
            return {}
        if self.session is None:
            return {"state": self.state}
        if self.handle is None:
            return {"state": self.tdef.init()}
        blob = self.session.seal_state(self.handle, STATE_STREAM, self.env.uid)
        return {"sealed_state": blob.to_bytes(), "state_seq": self.env.uid}

    def counters(self) -> dict:
        out = {"encrypt_ops": self.encrypt_ops, "decrypt_ops": self.decrypt_ops,
               "records_in": self.records_in, "records_out": self.records_out,
               "enclave_calls": 0}
        if self.session is not None:
            m = self.session.metrics
            out.update(encrypt_ops=m.calls + m.encrypt_calls, decrypt_ops=m.calls,
                       enclave_calls=m.calls,
                       simulated_crossing_time=m.simulated_crossing_time)
        return out

    def close(self) -> None:
        if self.session is not None:
            self.session.close()


def _wedge(env: ComponentEnv) -> None:
    """Test hook: behave like a transform that never returns."""
    env.progress.busy = 1
    while not env.stop.is_set():
        time.sleep(0.05)


def _worker(env: ComponentEnv) -> dict:
    is_sink = env.role is Role.SINK
    push = None if is_sink else connect_push([env.outbound])
    try:
        pull = connect_pull([env.inbound])
    except Exception:
        if push is not None:
            push.close()
        raise
    proc = _Processor(env)
    meter = None if is_sink else env.meter()
    env.status.put(("live", env.name))
    stall_after = env.hooks.get("stall_after", {}).get(env.stage)
    eos_in: dict[int, int] = {}
    eos_seq: dict[int, int] = {}
    collected: list[tuple[int, int, bytes]] = []
    frames_in = frames_out = bytes_in = bytes_out = 0
    leaving = retired = aborted = False
    try:
        while True:
            if env.stop.is_set():
                aborted = True
                break
            if env.retire is not None and env.retire.is_set() and not leaving:
                pull.leave()
                leaving = True
            try:
                item = pull.recv_event(timeout=_POLL)
            except RecvTimeout:
                continue
            except SocketClosed:
                aborted = True
                break
            if isinstance(item, UpstreamClosed):
                if item.had_eos:
                    break
                if leaving:
                    retired = True
                    break
                raise ConnectionError("upstream router vanished before end of stream")
            if item.eos:
                eos_in[item.stream_id] = eos_in.get(item.stream_id, 0) + 1
                eos_seq[item.stream_id] = max(eos_seq.get(item.stream_id, 0), item.seq_no)
                continue
            if stall_after is not None and frames_in >= stall_after:
                _wedge(env)
                aborted = True
                break
            env.progress.busy = 1
            frames_in += 1
            bytes_in += len(item.payload)
            if proc.tdef is None:
                collected.append((item.stream_id, item.seq_no, item.payload))
            else:
                out = proc.process(item)
                if push is not None:
                    push.send(Frame(item.stream_id, item.seq_no, item.flags, out))
                    frames_out += 1
                    bytes_out += len(out)
                    if meter:
                        meter.add(len(out))
            env.progress.frames += 1
            env.progress.busy = 0
        if push is not None and not (retired or aborted):
            for sid in sorted(eos_in):
                push.send(Frame.end_of_stream(sid, eos_seq[sid]))
    finally:
        if push is not None:
            push.close()
        pull.close()
        if meter:
            meter.close()
    report = {"frames_in": frames_in, "frames_out": frames_out, "bytes_in": bytes_in,
              "bytes_out": bytes_out, "eos_in": eos_in, "retired": retired,
              "aborted": aborted, "completions": 0 if (retired or aborted) else 1}
    report.update(proc.counters())
    if not aborted:
        report.update(proc.export_state())
    proc.close()
    if is_sink and proc.tdef is None:
        report["collected"] = collected
    return report
