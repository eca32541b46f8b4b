"""Deploy a pipeline on this host as threads or forked processes."""
from __future__ import annotations

import itertools
import multiprocessing as mp
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..enclave import STATE_STREAM, CostModel, NoKey, SealedBlob, key_from_env, unseal
from ..transforms import decode_batch, decode_state
from ..wire import Endpoint
from .components import ComponentEnv, Progress, run_component
from .config import LOCAL_HOSTS, Mode, PipelineSpec, Role, StageSpec

DEFAULT_LIVE_TIMEOUT = 30.0


class LaunchError(Exception):
    pass


class LaunchFailure(LaunchError):
    """A component could not start; nothing is left running."""

    def __init__(self, name: str, reason: str):
        super().__init__(f"{name}: {reason}")
        self.name = name
        self.reason = reason


class UnknownStage(LaunchError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown stage"


class CannotScaleSource(LaunchError):
    pass


class PipelineFailure(LaunchError):
    def __init__(self, name: str, reason: str, detail: str = ""):
        super().__init__(f"{name}: {reason}")
        self.name = name
        self.reason = reason
        self.detail = detail


class PipelineTimeout(LaunchError, TimeoutError):
    def __init__(self, stalled_stage: str, snapshot: dict):
        super().__init__(f"pipeline did not finish; stalled at stage {stalled_stage!r}")
        self.stalled_stage = stalled_stage
        self.snapshot = snapshot


@dataclass
class Component:
    name: str
    stage: str
    role: Role
    index: int
    env: ComponentEnv
    runner: Any = None
    status: str = "starting"
    report: dict | None = None
    retiring: bool = False


@dataclass
class StageStats:
    components: int = 0
    frames_in: int = 0
    frames_out: int = 0
    bytes_in: int = 0
    bytes_out: int = 0
    records_in: int = 0
    records_out: int = 0
    encrypt_ops: int = 0
    decrypt_ops: int = 0
    enclave_calls: int = 0


@dataclass
class PipelineReport:
    mode: Mode
    completion_time: float
    stages: dict[str, StageStats]
    components: dict[str, dict]
    stage_states: dict[str, Any] = field(default_factory=dict)
    result: Any = None


def free_ports(n: int) -> list[int]:
    """``n`` distinct ports that are currently unused on every interface."""
    socks = []
    try:
        for _ in range(n):
            s = socket.socket()
            s.bind(("0.0.0.0", 0))
            socks.append(s)
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def free_port() -> int:
    return free_ports(1)[0]


def with_free_ports(spec: PipelineSpec) -> PipelineSpec:
    """Copy of ``spec`` with every router moved to unused local ports."""
    routers = [s.name for s in spec.stages if s.role is Role.ROUTER]
    it = iter(free_ports(2 * len(routers)))
    return spec.with_ports({name: (next(it), next(it)) for name in routers})


def _local(ep: Endpoint | None, spec: PipelineSpec) -> Endpoint | None:
    if ep is None:
        return None
    router_names = {s.name for s in spec.stages if s.role is Role.ROUTER}
    if ep.host in router_names or ep.host in LOCAL_HOSTS:
        return Endpoint("127.0.0.1", ep.port)
    return ep


class Deployment:
    def __init__(self, spec: PipelineSpec, runner: str, key: bytes | None, stats_dir,
                 cost: CostModel | None, realistic_delay: bool, hooks: dict):
        if runner not in ("thread", "process"):
            raise ValueError("runner must be 'thread' or 'process'")
        self.spec = spec
        self.runner = runner
        self.key = key
        self.stats_dir = Path(stats_dir) if stats_dir is not None else None
        self.cost = cost
        self.realistic_delay = realistic_delay
        self.hooks = hooks
        self._ctx = mp.get_context("fork") if runner == "process" else None
        self.status = self._ctx.Queue() if self._ctx else queue.Queue()
        self.stop = self._ctx.Event() if self._ctx else threading.Event()
        self.components: dict[str, Component] = {}
        self._uids = itertools.count(1)
        self._counts = {s.name: 0 for s in spec.stages}
        self.t0 = time.time()
        self.started = time.monotonic()
        self.finished_at: float | None = None
        self._failure: tuple | None = None

    # -- component lifecycle ---------------------------------------------
    def _make(self, stage: StageSpec) -> Component:
        i = self._counts[stage.name]
        self._counts[stage.name] += 1
        name = stage.name if stage.role is Role.ROUTER else f"{stage.name}.{i}"
        pos = self.spec.index(stage.name)
        upstreams = self.spec.stages[pos - 1].workers if stage.role is Role.ROUTER else 1
        env = ComponentEnv(
            name=name, stage=stage.name, role=stage.role, index=i, uid=next(self._uids),
            status=self.status, stop=self.stop,
            retire=(self._ctx.Event() if self._ctx else threading.Event()),
            progress=Progress(self._ctx), mode=self.spec.mode, key=self.key, t0=self.t0,
            registry=self.spec.registry, stats_dir=self.stats_dir,
            inbound=_local(stage.inbound, self.spec), outbound=_local(stage.outbound, self.spec),
            transform=stage.transform, partitions=stage.workers, data_file=stage.data_file,
            chunk_records=self.spec.chunk_records, expected_upstreams=upstreams,
            cost=self.cost, realistic_delay=self.realistic_delay, hooks=self.hooks,
        )
        comp = Component(name, stage.name, stage.role, i, env)
        self.components[name] = comp
        return comp

    def _start(self, comp: Component) -> None:
        if self._ctx is None:
            comp.runner = threading.Thread(target=run_component, args=(comp.env,),
                                           name=comp.name, daemon=True)
        else:
            comp.runner = self._ctx.Process(target=run_component, args=(comp.env,),
                                            name=comp.name, daemon=True)
        comp.runner.start()

    def _handle(self, msg) -> None:
        kind, name = msg[0], msg[1]
        comp = self.components.get(name)
        if comp is None:
            return
        if kind == "live":
            if comp.status == "starting":
                comp.status = "live"
        elif kind == "done":
            comp.report = msg[2]
            comp.status = "retired" if msg[2].get("retired") else "done"
        elif kind == "failed":
            comp.status = "failed"
            comp.report = {"error": msg[2]}
            if self._failure is None:
                self._failure = (name, msg[2], msg[3] if len(msg) > 3 else "")

    def _pump(self, timeout: float) -> bool:
        try:
            msg = self.status.get(timeout=timeout)
        except queue.Empty:
            return False
        self._handle(msg)
        while True:
            try:
                self._handle(self.status.get_nowait())
            except queue.Empty:
                return True

    def _start_group(self, comps: list[Component], timeout: float) -> None:
        failure = self._await_live(comps, timeout)
        if failure is not None:
            self.teardown()
            raise LaunchFailure(*failure)

    def _await_live(self, comps: list[Component], timeout: float) -> tuple | None:
        for c in comps:
            self._start(c)
        deadline = time.monotonic() + timeout
        while True:
            failed = [c for c in comps if c.status == "failed"]
            if failed:
                return failed[0].name, failed[0].report["error"]
            if self._failure is not None:
                return self._failure[0], self._failure[1]
            if not any(c.status == "starting" for c in comps):
                return None
            if time.monotonic() > deadline:
                return next(c.name for c in comps if c.status == "starting"), \
                    "did not come up in time"
            self._pump(0.05)

    def _discard(self, comps: list[Component]) -> None:
        """Withdraw components added by a scale-up that could not complete."""
        names = {c.name for c in comps}
        for c in comps:
            c.env.retire.set()
            c.retiring = True
        for c in comps:
            if c.runner is not None:
                c.runner.join(5.0)
        while self._pump(0):
            pass
        for c in comps:
            if c.status == "failed":
                del self.components[c.name]
        if self._failure is not None and self._failure[0] in names:
            self._failure = None

    def teardown(self, grace: float = 5.0) -> None:
        self.stop.set()
        deadline = time.monotonic() + grace
        for c in self.components.values():
            if c.runner is None:
                continue
            c.runner.join(max(0.0, deadline - time.monotonic()))
            if self._ctx is not None and c.runner.is_alive():
                c.runner.terminate()
                c.runner.join(1.0)
        while self._pump(0):
            pass

    # -- queries -----------------------------------------------------------
    def live(self, stage: str | None = None) -> list[Component]:
        return [c for c in self.components.values()
                if c.status in ("starting", "live") and (stage is None or c.stage == stage)]

    def snapshot(self) -> dict[str, dict]:
        return {n: {"stage": c.stage, "status": c.status, "frames": c.env.progress.frames,
                    "busy": bool(c.env.progress.busy)} for n, c in self.components.items()}

    def _stalled_stage(self) -> str:
        order = {s.name: i for i, s in enumerate(self.spec.stages)}
        pending = [c for c in self.components.values() if c.status in ("starting", "live")]
        busy = [c for c in pending if c.env.progress.busy]
        pool = busy or pending
        if not pool:
            return self.spec.stages[-1].name
        pick = max if busy else min
        return pick(pool, key=lambda c: order[c.stage]).stage


def _resolve_key(spec: PipelineSpec, key: bytes | None) -> bytes | None:
    if spec.mode is Mode.CLEAR:
        return key
    if key is not None:
        return key
    try:
        return key_from_env(spec.key_ref)
    except NoKey as exc:
        raise LaunchFailure("pipeline", str(exc)) from None


def launch(spec: PipelineSpec, *, runner: str = "thread", key: bytes | None = None,
           stats_dir=None, cost: CostModel | None = None, realistic_delay: bool = False,
           hooks: dict | None = None, live_timeout: float = DEFAULT_LIVE_TIMEOUT) -> Deployment:
    """Start every component and return once all of them report live.

    Routers come up first, then workers, then sinks, then sources, so no
    data moves until the whole chain is connected.
    """
    key = _resolve_key(spec, key)
    for s in spec.stages:
        if s.role is Role.SOURCE and not s.data_file:
            raise LaunchFailure(s.name, "source has no data_file")
        if s.role is Role.SOURCE and not Path(s.data_file).is_file():
            raise LaunchFailure(s.name, f"data file {s.data_file} not found")
    spec.registry.freeze()
    dep = Deployment(spec, runner, key, stats_dir, cost, realistic_delay, hooks or {})
    for role in (Role.ROUTER, Role.WORKER, Role.SINK, Role.SOURCE):
        group = [dep._make(s) for s in spec.stages if s.role is role
                 for _ in range(s.workers)]
        dep._start_group(group, live_timeout)
    return dep


def scale_stage(dep: Deployment, stage: str, n: int,
                live_timeout: float = DEFAULT_LIVE_TIMEOUT) -> Deployment:
    """Grow or shrink a worker stage while data flows.

    Scale-up starts new workers that join their router's rotation. Scale-down
    asks the newest workers to leave: they finish the frames already sent to
    them and exit without forwarding end-of-stream.
    """
    try:
        st = dep.spec.stage(stage)
    except KeyError:
        raise UnknownStage(f"no stage named {stage!r}") from None
    if st.role is Role.SOURCE:
        raise CannotScaleSource("sources are partitioned at launch and cannot be rescaled")
    if st.role is not Role.WORKER:
        raise LaunchError(f"only worker stages can be scaled, {stage!r} is a {st.role.value}")
    if n < 1:
        raise ValueError("a stage needs at least one worker")
    while dep._pump(0):
        pass
    active = [c for c in dep.live(stage) if not c.retiring]
    if n > len(active):
        feeder = dep.spec.stages[dep.spec.index(stage) - 1].name
        drained = LaunchError(f"{feeder!r} has already delivered all its input; "
                              f"new {stage!r} workers would receive nothing")
        if not dep.live(feeder):
            raise drained
        new = [dep._make(st) for _ in range(n - len(active))]
        failure = dep._await_live(new, live_timeout)
        if failure is not None:
            dep._discard(new)
            if not dep.live(feeder):
                raise drained
            raise LaunchError(f"{failure[0]}: {failure[1]}")
    else:
        for c in sorted(active, key=lambda c: c.index)[n:]:
            c.retiring = True
            c.env.retire.set()
    return dep


def _open_state(dep: Deployment, report: dict):
    if "sealed_state" in report:
        raw = unseal(dep.key, SealedBlob.from_bytes(report["sealed_state"]), STATE_STREAM,
                     report["state_seq"])
        return decode_state(raw)
    return report.get("state")


def _build_report(dep: Deployment) -> PipelineReport:
    spec = dep.spec
    stages = {s.name: StageStats() for s in spec.stages}
    states: dict[str, Any] = {}
    collected: list = []
    for c in dep.components.values():
        r = c.report or {}
        st = stages[c.stage]
        st.components += 1
        for f in ("frames_in", "frames_out", "bytes_in", "bytes_out", "records_in",
                  "records_out", "encrypt_ops", "decrypt_ops", "enclave_calls"):
            setattr(st, f, getattr(st, f) + int(r.get(f, 0)))
        if c.role is Role.ROUTER:
            st.frames_in += r.get("frames", 0)
            st.frames_out += r.get("frames", 0)
            st.bytes_in += r.get("bytes", 0)
            st.bytes_out += r.get("bytes", 0)
        stage = spec.stage(c.stage)
        if stage.transform and ("state" in r or "sealed_state" in r):
            tdef = spec.registry.get(stage.transform)
            value = _open_state(dep, r)
            if c.stage in states and tdef.merge is not None:
                states[c.stage] = tdef.merge(states[c.stage], value)
            elif c.stage not in states:
                states[c.stage] = value
        if "collected" in r:
            collected.extend(r["collected"])
    sink = spec.stages[-1]
    if sink.transform:
        result = states.get(sink.name)
    else:
        result = []
        for sid, seq, payload in sorted(collected, key=lambda t: (t[0], t[1])):
            if spec.mode is not Mode.CLEAR:
                payload = unseal(dep.key, SealedBlob.from_bytes(payload), sid, seq)
            result.extend(decode_batch(payload))
    elapsed = (dep.finished_at or time.monotonic()) - dep.started
    reports = {n: (c.report or {}) for n, c in dep.components.items()}
    return PipelineReport(spec.mode, elapsed, stages, reports, states, result)


def await_completion(dep: Deployment, timeout: float | None = None) -> PipelineReport:
    """Wait for every component to finish and merge their results.

    Raises PipelineFailure if a component fails and PipelineTimeout, naming
    the most downstream stage still busy, if ``timeout`` elapses.
    """
    deadline = None if timeout is None else time.monotonic() + timeout
    while True:
        if dep._failure is not None:
            name, reason, detail = dep._failure
            dep.teardown()
            raise PipelineFailure(name, reason, detail)
        if not dep.live():
            break
        if deadline is not None and time.monotonic() > deadline:
            stalled, snap = dep._stalled_stage(), dep.snapshot()
            dep.teardown()
            raise PipelineTimeout(stalled, snap)
        dep._pump(0.05)
    dep.finished_at = time.monotonic()
    for c in dep.components.values():
        if c.runner is not None:
            c.runner.join(5.0)
    return _build_report(dep)


def run_pipeline(spec: PipelineSpec, timeout: float | None = None, **kwargs) -> PipelineReport:
    return await_completion(launch(spec, **kwargs), timeout)
