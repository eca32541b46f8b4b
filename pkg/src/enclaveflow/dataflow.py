"""Reactive map/filter/reduce chains and the built-in transform library.

    >>> people = [{"age": 20}, {"age": 17}, {"age": 30}]
    >>> out = []
    >>> (Observable.from_table(people)
    ...     .map(lambda p: p["age"])
    ...     .filter(lambda age: age > 18)
    ...     .reduce(lambda acc, age: {"count": acc["count"] + 1, "sum": acc["sum"] + age},
    ...             {"count": 0, "sum": 0})
    ...     .subscribe(out.append))
    >>> out
    [{'count': 2, 'sum': 50}]

Observables are cold: each ``subscribe`` runs the source again.
"""
from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass
from typing import Any, Callable, Iterable

from . import kernels
from .transforms import (
    DEFAULT_REGISTRY,
    TransformDef,
    TransformKind,
    register_transform,
)


class StageError(Exception):
    """A map/filter/reduce function failed on the record at ``index``."""

    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"stage failed on record {index}: {type(cause).__name__}: {cause}")
        self.index = index
        self.cause = cause


class ChainError(ValueError):
    pass


class SchemaMismatch(ValueError):
    pass


class _CallbackFailed(Exception):
    def __init__(self, inner: BaseException):
        self.inner = inner


_MAP, _FILTER, _REDUCE = "map", "filter", "reduce"


class Observable:
    def __init__(self, source, chain: tuple = ()):
        self._source = source
        self._chain = chain

    @classmethod
    def from_source(cls, producer) -> "Observable":
        """``producer`` is a callable returning an iterable of record batches,
        or a re-iterable of batches. Plain iterators only run once."""
        return cls(producer)

    @classmethod
    def from_table(cls, records: Iterable) -> "Observable":
        table = list(records)
        return cls(lambda: [table])

    def _then(self, step) -> "Observable":
        if self._chain and self._chain[-1][0] == _REDUCE:
            raise ChainError("reduce must be the last stage of a chain")
        return Observable(self._source, self._chain + (step,))

    def map(self, fn: Callable[[Any], Any]) -> "Observable":
        return self._then((_MAP, fn))

    def filter(self, pred: Callable[[Any], bool]) -> "Observable":
        return self._then((_FILTER, pred))

    def reduce(self, fn: Callable[[Any, Any], Any], init: Any = None) -> "Observable":
        return self._then((_REDUCE, (fn, init)))

    def subscribe(self, on_next=None, on_error=None, on_completed=None) -> None:
        """Drive the chain. Exactly one of on_error / on_completed fires.

        Exceptions raised by the callbacks themselves propagate to the caller.
        """
        on_next = on_next or (lambda item: None)
        steps = self._chain
        reducer = None
        if steps and steps[-1][0] == _REDUCE:
            fn, init = steps[-1][1]
            reducer = fn
            acc = copy.deepcopy(init)
            steps = steps[:-1]
        index = 0
        error = None
        try:
            batches = self._source() if callable(self._source) else self._source
            for batch in batches:
                for record in batch:
                    value = record
                    keep = True
                    try:
                        for kind, fn in steps:
                            if kind == _MAP:
                                value = fn(value)
                            elif not fn(value):
                                keep = False
                                break
                        if keep and reducer is not None:
                            acc = reducer(acc, value)
                    except Exception as exc:
                        raise StageError(index, exc) from exc
                    index += 1
                    if keep and reducer is None:
                        try:
                            on_next(value)
                        except Exception as exc:
                            raise _CallbackFailed(exc) from None
        except _CallbackFailed as wrapped:
            raise wrapped.inner
        except Exception as exc:
            error = exc
        if error is not None:
            if on_error is not None:
                on_error(error)
            return
        if reducer is not None:
            on_next(acc)
        if on_completed is not None:
            on_completed()


def from_source(producer) -> Observable:
    return Observable.from_source(producer)


# --- schemas and parsers ----------------------------------------------------

_TYPE_CODES = {"string": "s", "str": "s", "int": "i", "integer": "i", "float": "f"}


@dataclass(frozen=True)
class Schema:
    fields: tuple[tuple[str, str], ...]

    @classmethod
    def of(cls, *fields: tuple[str, str]) -> "Schema":
        for name, typ in fields:
            if typ not in _TYPE_CODES:
                raise ValueError(f"unknown field type {typ!r} for {name!r}")
        return cls(tuple(fields))

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.fields]

    @property
    def codes(self) -> str:
        return "".join(_TYPE_CODES[t] for _, t in self.fields)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __len__(self):
        return len(self.fields)


FLIGHT_SCHEMA = Schema.of(
    ("carrier", "string"), ("year", "int"), ("month", "int"), ("day", "int"),
    ("dep_delay", "int"), ("arr_delay", "int"),
)
FLIGHT_HEADER = ",".join(FLIGHT_SCHEMA.names)


def csv_parse(lines, schema: Schema, strict: bool = False) -> tuple[list, int]:
    """Parse CSV lines into typed records; return ``(records, malformed)``.

    Quoted fields follow RFC 4180. Lines with the wrong field count or an
    unparsable number are dropped and counted, unless ``strict`` is set, in
    which case a field-count mismatch raises SchemaMismatch.
    """
    if isinstance(lines, str):
        lines = lines.split("\n")
    rows = list(csv.reader(lines))
    if strict:
        for i, row in enumerate(rows):
            if len(row) != len(schema):
                raise SchemaMismatch(f"line {i}: {len(row)} fields, schema has {len(schema)}")
    return kernels.convert_rows(rows, schema.codes)


def json_parse(text: str, schema: Schema | None = None) -> list:
    """Parse a JSON array, or JSON Lines, into records.

    Objects are laid out in schema field order (missing keys become None);
    arrays are taken positionally.
    """
    text = text.strip()
    if not text:
        return []
    if text.startswith("["):
        items = json.loads(text)
    else:
        items = [json.loads(line) for line in text.splitlines() if line.strip()]
    out = []
    for item in items:
        if isinstance(item, dict):
            if schema is None:
                raise SchemaMismatch("JSON objects need a schema to be laid out")
            out.append([item.get(name) for name in schema.names])
        else:
            out.append(list(item))
    return out


def field_project(records, indices) -> list:
    return [[r[i] for i in indices] for r in records]


def keyed_reduce(state: dict, records, key_index: int, value_index: int) -> dict:
    """Per-key ``[count, sum]`` fold of one value column (in place)."""
    return kernels.fold_count_sum(state, records, key_index, value_index)


def merge_count_sum(a: dict, b: dict) -> dict:
    """Combine two keyed count/sum states component-wise."""
    out = {k: list(v) for k, v in a.items()}
    for k, (count, total) in b.items():
        if k in out:
            out[k][0] += count
            out[k][1] += total
        else:
            out[k] = [count, total]
    return out


# --- registered transforms --------------------------------------------------

def csv_parse_transform(schema: Schema, name: str = "csv_parse", strict: bool = False,
                        memory_hint: int = 256 * 1024) -> TransformDef:
    def run(malformed, text, ctx):
        records, bad = csv_parse(text.split("\n") if text else [], schema, strict)
        return (malformed or 0) + bad, records
    return TransformDef(name, TransformKind.PARSE, run, memory_hint, init=lambda: 0,
                        merge=lambda a, b: a + b)


def json_parse_transform(schema: Schema, name: str = "json_parse",
                         memory_hint: int = 256 * 1024) -> TransformDef:
    def run(state, text, ctx):
        return state, json_parse(text, schema)
    return TransformDef(name, TransformKind.PARSE, run, memory_hint)


def project_transform(indices, name: str) -> TransformDef:
    indices = tuple(indices)

    def run(state, records, ctx):
        return state, field_project(records, indices)
    return TransformDef(name, TransformKind.MAP, run)


def _union_sorted(a, b):
    return sorted(set(a) | set(b))


def delayed_filter_transform(schema: Schema = FLIGHT_SCHEMA, name: str = "filter_delayed",
                             delay_field: str = "arr_delay", key_field: str = "carrier") -> TransformDef:
    """Keep records whose delay is strictly positive.

    The state collects every key inspected, so carriers that were never late
    still appear in the final result.
    """
    di, ki = schema.index(delay_field), schema.index(key_field)

    def run(seen, records, ctx):
        keys = set(seen or ())
        keys.update(r[ki] for r in records)
        return sorted(keys), kernels.filter_gt(records, di, 0)
    return TransformDef(name, TransformKind.FILTER, run, 64 * 1024, init=list,
                        merge=_union_sorted)


def keyed_reduce_transform(key_field: str, value_field: str, schema: Schema = FLIGHT_SCHEMA,
                           name: str = "reduce_by_carrier") -> TransformDef:
    ki, vi = schema.index(key_field), schema.index(value_field)

    def run(state, records, ctx):
        return keyed_reduce(state, records, ki, vi), []
    return TransformDef(name, TransformKind.REDUCE, run, 64 * 1024, init=dict,
                        merge=merge_count_sum)


BUILTINS = (
    csv_parse_transform(FLIGHT_SCHEMA),
    json_parse_transform(FLIGHT_SCHEMA),
    delayed_filter_transform(),
    keyed_reduce_transform("carrier", "arr_delay"),
    project_transform((0, 5), "project_carrier_delay"),
)

for _t in BUILTINS:
    if _t.name not in DEFAULT_REGISTRY:
        register_transform(_t)
