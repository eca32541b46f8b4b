"""Transform definitions, the static registry, and the record-batch codec.

A transform is a pure function ``fn(state, batch, ctx) -> (state, batch)``.
PARSE transforms receive the chunk as text; every other kind receives a list
of records (lists of scalars). ``ctx`` is the only handle a transform gets:
it can allocate scratch memory and nothing else.
"""
from __future__ import annotations

import enum
import json
import threading
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Callable, Mapping


class TransformError(Exception):
    pass


class RegistrationAfterCreate(TransformError):
    pass


class DuplicateName(TransformError):
    pass


class UnknownTransform(TransformError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class TransformKind(enum.Enum):
    MAP = "map"
    FILTER = "filter"
    REDUCE = "reduce"
    PARSE = "parse"


@dataclass(frozen=True)
class TransformDef:
    name: str
    kind: TransformKind
    fn: Callable[[Any, Any, Any], tuple[Any, Any]]
    memory_hint: int = 0
    init: Callable[[], Any] = field(default=lambda: None)
    merge: Callable[[Any, Any], Any] | None = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("transform name must be non-empty")
        if self.memory_hint < 0:
            raise ValueError("memory_hint must be non-negative")


class Registry:
    """Name -> TransformDef map that freezes when the first enclave is created."""

    def __init__(self, defs=()):
        self._defs: dict[str, TransformDef] = {}
        self._frozen = False
        self._lock = threading.Lock()
        for d in defs:
            self.register(d)

    def register(self, tdef: TransformDef) -> None:
        with self._lock:
            if self._frozen:
                raise RegistrationAfterCreate(
                    f"cannot register {tdef.name!r}: an enclave already exists")
            if tdef.name in self._defs:
                raise DuplicateName(f"transform {tdef.name!r} is already registered")
            self._defs[tdef.name] = tdef

    def freeze(self) -> Mapping[str, TransformDef]:
        with self._lock:
            self._frozen = True
            return MappingProxyType(dict(self._defs))

    @property
    def frozen(self) -> bool:
        return self._frozen

    def get(self, name: str) -> TransformDef:
        try:
            return self._defs[name]
        except KeyError:
            raise UnknownTransform(f"no transform named {name!r}") from None

    def __contains__(self, name) -> bool:
        return name in self._defs

    def names(self) -> list[str]:
        return sorted(self._defs)


DEFAULT_REGISTRY = Registry()


def register_transform(tdef: TransformDef, registry: Registry | None = None) -> None:
    (registry or DEFAULT_REGISTRY).register(tdef)


_encoder = json.JSONEncoder(ensure_ascii=False, separators=(",", ":"), allow_nan=True)
_decoder = json.JSONDecoder()


def encode_batch(records) -> bytes:
    return _encoder.encode(records).encode("utf-8")


def decode_batch(data) -> list:
    if not data:
        return []
    return _decoder.decode(bytes(data).decode("utf-8"))


def encode_state(state) -> bytes:
    return encode_batch(state)


def decode_state(data):
    return _decoder.decode(bytes(data).decode("utf-8"))


class PlainContext:
    """Execution context outside any enclave: allocation is unmetered."""

    __slots__ = ()

    def alloc(self, nbytes: int) -> memoryview:
        return memoryview(bytearray(nbytes))


PLAIN_CONTEXT = PlainContext()


@dataclass
class Applied:
    state: Any
    payload: bytes
    records_in: int
    records_out: int


def apply_transform(tdef: TransformDef, state, payload, ctx=PLAIN_CONTEXT) -> Applied:
    """Decode ``payload``, run ``tdef`` and encode its output batch."""
    if tdef.kind is TransformKind.PARSE:
        batch = bytes(payload).decode("utf-8")
        n_in = batch.count("\n") + 1 if batch else 0
    else:
        batch = decode_batch(payload)
        n_in = len(batch)
    state, out = tdef.fn(state, batch, ctx)
    if out is None:
        out = []
    return Applied(state, encode_batch(out), n_in, len(out))
