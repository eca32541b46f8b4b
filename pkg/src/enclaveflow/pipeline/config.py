"""Pipeline description files.

The format is INI (Python ``configparser`` dialect, ``#`` comments). An
optional ``[pipeline]`` section sets ``mode`` (clear | encrypted | enclave),
``key_env`` (environment variable holding the hex key) and
``chunk_records``. Every other section is a stage, in pipeline order::

    [router_data_mapper]
    role = router
    from = tcp://*:5555
    to = tcp://*:5556

    [mapper]
    role = worker
    transform = csv_parse
    workers = 2
    from = tcp://router_data_mapper:5556
    to = tcp://router_mapper_filter:5557
    constraint = type==sgx

Stage keys: ``role`` (source | router | worker | sink), ``workers``,
``from``, ``to``, ``transform``, ``constraint`` (comma-separated placement
tags) and, for sources, ``data_file``. Workers and sources name the router
they talk to as the endpoint host.
"""
from __future__ import annotations

import configparser
import enum
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..transforms import DEFAULT_REGISTRY, Registry, TransformKind, UnknownTransform
from ..wire import Endpoint

SGX_TAG = "type==sgx"
DEFAULT_CHUNK_RECORDS = 2048
DEFAULT_KEY_ENV = "ENCLAVEFLOW_KEY"

PIPELINE_KEYS = {"mode", "key_env", "chunk_records"}
STAGE_KEYS = {"role", "workers", "from", "to", "transform", "constraint", "data_file"}
LOCAL_HOSTS = {"localhost", "127.0.0.1"}


class SpecError(Exception):
    pass


class ConfigSyntaxError(SpecError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class TopologyError(SpecError):
    pass


class ModeError(SpecError):
    pass


class Mode(enum.Enum):
    CLEAR = "clear"
    ENCRYPTED = "encrypted"
    ENCLAVE = "enclave"


class Role(enum.Enum):
    SOURCE = "source"
    ROUTER = "router"
    WORKER = "worker"
    SINK = "sink"


@dataclass(frozen=True)
class StageSpec:
    name: str
    role: Role
    transform: str | None = None
    workers: int = 1
    inbound: Endpoint | None = None
    outbound: Endpoint | None = None
    placement: frozenset[str] = frozenset()
    data_file: str | None = None
    line: int | None = None


@dataclass(frozen=True)
class PipelineSpec:
    stages: tuple[StageSpec, ...]
    mode: Mode = Mode.CLEAR
    key_ref: str = DEFAULT_KEY_ENV
    chunk_records: int = DEFAULT_CHUNK_RECORDS
    registry: Registry = field(default=DEFAULT_REGISTRY, compare=False, repr=False)

    def stage(self, name: str) -> StageSpec:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def index(self, name: str) -> int:
        return [s.name for s in self.stages].index(name)

    @property
    def partitions(self) -> int:
        return self.stages[0].workers

    def with_mode(self, mode: Mode | str) -> "PipelineSpec":
        spec = replace(self, mode=Mode(mode))
        validate(spec)
        return spec

    def with_workers(self, counts: dict[str, int]) -> "PipelineSpec":
        names = {s.name for s in self.stages}
        for n in counts:
            if n not in names:
                raise TopologyError(f"no stage named {n!r}")
        stages = tuple(replace(s, workers=counts.get(s.name, s.workers)) for s in self.stages)
        spec = replace(self, stages=stages)
        validate(spec)
        return spec

    def with_data_file(self, path) -> "PipelineSpec":
        stages = tuple(replace(s, data_file=str(path)) if s.role is Role.SOURCE else s
                       for s in self.stages)
        return replace(self, stages=stages)

    def with_ports(self, ports: dict[str, tuple[int, int]]) -> "PipelineSpec":
        """Move router ``name -> (in_port, out_port)`` and re-point neighbours."""
        stages = list(self.stages)
        for i, s in enumerate(stages):
            if s.role is Role.ROUTER and s.name in ports:
                pin, pout = ports[s.name]
                stages[i] = replace(s, inbound=Endpoint(s.inbound.host, pin),
                                    outbound=Endpoint(s.outbound.host, pout))
        for i, s in enumerate(stages):
            if s.role is Role.ROUTER:
                continue
            if s.outbound is not None and i + 1 < len(stages):
                nxt = stages[i + 1]
                stages[i] = s = replace(s, outbound=Endpoint(s.outbound.host, nxt.inbound.port))
            if s.inbound is not None and i > 0:
                prv = stages[i - 1]
                stages[i] = replace(s, inbound=Endpoint(s.inbound.host, prv.outbound.port))
        spec = replace(self, stages=tuple(stages))
        validate(spec)
        return spec


def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    """Map (section, key) and (section, None) to 1-based line numbers."""
    where: dict[tuple[str, str | None], int] = {}
    section = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), no)
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section is not None and not raw[:1].isspace():
            where.setdefault((section, m.group(1).strip()), no)
    return where


def _endpoint(value: str, line: int | None) -> Endpoint:
    try:
        return Endpoint.parse(value)
    except ValueError as exc:
        raise ConfigSyntaxError(str(exc), line) from None


def parse_spec(text: str, registry: Registry | None = None) -> PipelineSpec:
    """Parse and fully validate a pipeline description."""
    registry = registry or DEFAULT_REGISTRY
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                   strict=True, default_section="__defaults__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigSyntaxError("content before the first [section]", exc.lineno) from None
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as exc:
        raise ConfigSyntaxError(exc.message.split(":", 1)[-1].strip(), exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigSyntaxError("unparsable line", lineno) from None
    lines = _line_index(text)

    mode, key_ref, chunk = Mode.CLEAR, DEFAULT_KEY_ENV, DEFAULT_CHUNK_RECORDS
    stages = []
    for section in cp.sections():
        body = cp[section]
        if section == "pipeline":
            for key in body:
                if key not in PIPELINE_KEYS:
                    raise ConfigSyntaxError(f"unknown key {key!r} in [pipeline]",
                                            lines.get((section, key)))
            try:
                mode = Mode(body.get("mode", "clear").strip().lower())
            except ValueError:
                raise ConfigSyntaxError(f"unknown mode {body.get('mode')!r}",
                                        lines.get((section, "mode"))) from None
            key_ref = body.get("key_env", DEFAULT_KEY_ENV).strip()
            try:
                chunk = int(body.get("chunk_records", DEFAULT_CHUNK_RECORDS))
            except ValueError:
                raise ConfigSyntaxError("chunk_records must be an integer",
                                        lines.get((section, "chunk_records"))) from None
            continue
        for key in body:
            if key not in STAGE_KEYS:
                raise ConfigSyntaxError(f"unknown key {key!r} in [{section}]",
                                        lines.get((section, key)))
        at = lines.get((section, None))
        try:
            role = Role(body.get("role", "").strip().lower())
        except ValueError:
            raise ConfigSyntaxError(f"[{section}] needs role = source|router|worker|sink",
                                    lines.get((section, "role"), at)) from None
        try:
            workers = int(body.get("workers", "1"))
        except ValueError:
            raise ConfigSyntaxError("workers must be an integer",
                                    lines.get((section, "workers"))) from None
        tags = frozenset(t.strip() for t in body.get("constraint", "").split(",") if t.strip())
        stages.append(StageSpec(
            name=section, role=role, transform=(body.get("transform") or "").strip() or None,
            workers=workers,
            inbound=_endpoint(body["from"], lines.get((section, "from"))) if "from" in body else None,
            outbound=_endpoint(body["to"], lines.get((section, "to"))) if "to" in body else None,
            placement=tags, data_file=(body.get("data_file") or "").strip() or None, line=at,
        ))
    spec = PipelineSpec(tuple(stages), mode, key_ref, chunk, registry)
    validate(spec)
    return spec


def load_spec(path, registry: Registry | None = None) -> PipelineSpec:
    return parse_spec(Path(path).read_text(encoding="utf-8"), registry)


def _links_to(ep: Endpoint, router: StageSpec, port: int) -> bool:
    return ep.port == port and (ep.host == router.name or ep.host in LOCAL_HOSTS)


def validate(spec: PipelineSpec) -> None:
    """Check chain shape, endpoint wiring, transforms and placement tags."""
    stages = spec.stages
    if spec.chunk_records < 1:
        raise TopologyError("chunk_records must be >= 1")
    roles = [s.role for s in stages]
    ok_shape = (len(roles) >= 3 and len(roles) % 2 == 1 and roles[0] is Role.SOURCE
                and roles[-1] is Role.SINK
                and all(r is Role.ROUTER for r in roles[1::2])
                and all(r is Role.WORKER for r in roles[2:-1:2]))
    if not ok_shape:
        raise TopologyError(
            "stages must form source -> router -> (worker -> router)* -> sink, got "
            + " -> ".join(f"{s.name}({s.role.value})" for s in stages))
    names = [s.name for s in stages]
    if len(set(names)) != len(names):
        raise TopologyError("stage names must be unique")
    for s in stages:
        if s.workers < 1:
            raise TopologyError(f"{s.name}: workers must be >= 1")
        if s.role is Role.SOURCE and s.inbound is not None:
            raise TopologyError(f"source {s.name} cannot declare an inbound endpoint")
        if s.role is Role.SINK and s.outbound is not None:
            raise TopologyError(f"sink {s.name} cannot declare an outbound endpoint")
        if s.role is not Role.SOURCE and s.inbound is None:
            raise TopologyError(f"{s.name} needs a 'from' endpoint")
        if s.role is not Role.SINK and s.outbound is None:
            raise TopologyError(f"{s.name} needs a 'to' endpoint")
        if s.role is Role.ROUTER:
            if s.workers != 1:
                raise TopologyError(f"router {s.name} cannot be replicated")
            if s.inbound.port == s.outbound.port:
                raise TopologyError(f"router {s.name} uses port {s.inbound.port} twice")
            if s.transform:
                raise TopologyError(f"router {s.name} cannot run a transform")
        if s.role is Role.WORKER and not s.transform:
            raise TopologyError(f"worker stage {s.name} needs a transform")
        if s.transform:
            tdef = spec.registry.get(s.transform)
            if tdef.kind is TransformKind.REDUCE and s.role is not Role.SINK:
                raise TopologyError(f"{s.name}: reduce transforms must run in the sink")
    for i, s in enumerate(stages):
        if s.role is not Role.ROUTER:
            continue
        up, down = stages[i - 1], stages[i + 1]
        if not _links_to(up.outbound, s, s.inbound.port):
            raise TopologyError(f"{up.name} sends to {up.outbound}, which is not "
                                f"{s.name}'s inbound port {s.inbound.port}")
        if not _links_to(down.inbound, s, s.outbound.port):
            raise TopologyError(f"{down.name} reads from {down.inbound}, which is not "
                                f"{s.name}'s outbound port {s.outbound.port}")
    if spec.mode is Mode.ENCLAVE:
        for s in stages:
            if s.role in (Role.WORKER, Role.SINK) and s.transform and SGX_TAG not in s.placement:
                raise ModeError(f"enclave mode: stage {s.name} lacks constraint {SGX_TAG}")


def shipped_example_path() -> Path:
    return Path(__file__).resolve().parent.parent / "data" / "delayed_flights.pipeline"


__all__ = [
    "ConfigSyntaxError", "Mode", "ModeError", "PipelineSpec", "Role", "SGX_TAG", "SpecError",
    "StageSpec", "TopologyError", "UnknownTransform", "load_spec", "parse_spec",
    "shipped_example_path", "validate",
]
