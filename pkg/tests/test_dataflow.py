import json
from functools import reduce as fold

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enclaveflow.dataflow import (
    BUILTINS,
    FLIGHT_SCHEMA,
    ChainError,
    Observable,
    Schema,
    SchemaMismatch,
    StageError,
    csv_parse,
    field_project,
    json_parse,
    keyed_reduce,
    merge_count_sum,
)
from enclaveflow.transforms import DEFAULT_REGISTRY, apply_transform, decode_batch
from oracles import rfc4180_split

PEOPLE = [{"age": 20}, {"age": 17}, {"age": 30}]


def run(obs):
    events = []
    obs.subscribe(lambda x: events.append(("next", x)),
                  lambda e: events.append(("error", e)),
                  lambda: events.append(("done",)))
    return events


def count_sum(acc, age):
    return {"count": acc["count"] + 1, "sum": acc["sum"] + age}


def test_full_chain():
    obs = (Observable.from_table(PEOPLE).map(lambda p: p["age"])
           .filter(lambda a: a > 18).reduce(count_sum, {"count": 0, "sum": 0}))
    events = run(obs)
    assert events == [("next", {"count": 2, "sum": 50}), ("done",)]
    final = events[0][1]
    assert final["sum"] / final["count"] == 25


def test_map_and_filter_examples():
    ages = Observable.from_table(PEOPLE).map(lambda p: p["age"])
    assert [e[1] for e in run(ages) if e[0] == "next"] == [20, 17, 30]
    assert [e[1] for e in run(ages.filter(lambda a: a > 18)) if e[0] == "next"] == [20, 30]
    assert run(ages.filter(lambda a: False)) == [("done",)]
    assert [e[1] for e in run(ages.map(lambda a: a)) if e[0] == "next"] == [20, 17, 30]


def test_empty_source_and_reduce_identity():
    assert run(Observable.from_source(lambda: [])) == [("done",)]
    obs = Observable.from_source(lambda: []).reduce(count_sum, {"count": 0, "sum": 0})
    assert run(obs) == [("next", {"count": 0, "sum": 0}), ("done",)]
    single = Observable.from_table([7]).reduce(lambda a, r: a * 10 + r, 3)
    assert run(single)[0] == ("next", 37)


def test_map_failure_reports_index():
    def f(x):
        if x == 2:
            raise ValueError("two")
        return x

    events = run(Observable.from_table([1, 2, 3]).map(f))
    assert events[0] == ("next", 1)
    assert len(events) == 2 and events[1][0] == "error"
    err = events[1][1]
    assert isinstance(err, StageError) and err.index == 1


def test_producer_error_mid_stream():
    def producer():
        yield [1, 2]
        raise OSError("disk gone")

    events = run(Observable.from_source(producer))
    assert events[:2] == [("next", 1), ("next", 2)]
    assert events[2][0] == "error" and isinstance(events[2][1], OSError)
    assert ("done",) not in events


def test_cold_resubscribe():
    calls = []

    def producer():
        calls.append(1)
        return [[1, 2, 3]]

    obs = Observable.from_source(producer).reduce(lambda a, r: a + [r], [])
    assert run(obs)[0] == ("next", [1, 2, 3])
    assert run(obs)[0] == ("next", [1, 2, 3])
    assert len(calls) == 2


def test_reduce_must_be_last():
    with pytest.raises(ChainError):
        Observable.from_table([1]).reduce(lambda a, r: a, 0).map(lambda x: x)


def test_callback_errors_propagate():
    def bad(_):
        raise KeyError("callback bug")

    with pytest.raises(KeyError):
        Observable.from_table([1]).subscribe(bad, lambda e: None)


@settings(max_examples=200)
@given(st.lists(st.integers(-100, 100), max_size=40),
       st.lists(st.tuples(st.sampled_from(["map", "filter"]), st.integers(-5, 5)), max_size=5))
def test_chain_equals_list_fold(values, ops):
    obs = Observable.from_source(lambda: [values[:len(values) // 2], values[len(values) // 2:]])
    expected = list(values)
    for kind, k in ops:
        if kind == "map":
            obs = obs.map(lambda x, k=k: x * 2 + k)
            expected = [x * 2 + k for x in expected]
        else:
            obs = obs.filter(lambda x, k=k: x > k)
            expected = [x for x in expected if x > k]
    assert [e[1] for e in run(obs) if e[0] == "next"] == expected
    total = run(obs.reduce(lambda a, r: a - r, 0))[0][1]
    assert total == fold(lambda a, r: a - r, expected, 0)


# --- parsing -------------------------------------------------------------------

def test_csv_examples():
    schema = Schema.of(("carrier", "string"), ("date", "string"), ("arr_delay", "int"))
    assert csv_parse(["AA,2008-01-03,12"], schema) == ([["AA", "2008-01-03", 12]], 0)
    assert csv_parse(["", "AA,x,1"], schema) == ([["AA", "x", 1]], 1)
    two = Schema.of(("name", "string"), ("n", "int"))
    assert csv_parse(['"a,b",1'], two) == ([["a,b", 1]], 0)
    with pytest.raises(SchemaMismatch):
        csv_parse(["a,1,2"], two, strict=True)
    assert csv_parse(["a,notanumber"], two) == ([], 1)


field_text = st.text(alphabet='ab ,"', max_size=6)


@settings(max_examples=300)
@given(st.lists(st.lists(field_text, min_size=3, max_size=3), min_size=1, max_size=8))
def test_csv_matches_rfc4180_oracle(rows):
    def quote(f):
        return '"' + f.replace('"', '""') + '"' if any(c in f for c in ',"') or f == "" else f

    text = "\n".join(",".join(quote(f) for f in r) for r in rows)
    schema = Schema.of(("a", "string"), ("b", "string"), ("c", "string"))
    records, bad = csv_parse(text.split("\n"), schema)
    assert bad == 0
    assert records == rfc4180_split(text) == [list(r) for r in rows]


def test_json_parse_forms():
    arr = json.dumps([["AA", 2008, 1, 1, 0, 5]])
    objs = '{"carrier":"UA","arr_delay":3}\n{"carrier":"DL"}'
    assert json_parse(arr) == [["AA", 2008, 1, 1, 0, 5]]
    assert json_parse(objs, FLIGHT_SCHEMA) == [["UA", None, None, None, None, 3],
                                               ["DL", None, None, None, None, None]]
    assert json_parse("  ") == []
    with pytest.raises(SchemaMismatch):
        json_parse('{"a":1}')


def test_project():
    assert field_project([[1, 2, 3], [4, 5, 6]], (2, 0)) == [[3, 1], [6, 4]]


records = st.lists(st.tuples(st.sampled_from(["AA", "UA", "DL", "WN"]), st.integers(-60, 300)),
                   max_size=60)


@settings(max_examples=200)
@given(records, st.lists(st.integers(0, 60), max_size=4))
def test_partitioned_reduce_merges_to_single_fold(rows, cuts):
    rows = [list(r) for r in rows]
    whole = keyed_reduce({}, rows, 0, 1)
    bounds = sorted({0, len(rows), *[min(c, len(rows)) for c in cuts]})
    parts = [keyed_reduce({}, rows[a:b], 0, 1) for a, b in zip(bounds, bounds[1:])]
    merged = fold(merge_count_sum, parts, {})
    assert merged == whole
    # Merge is commutative and has {} as identity.
    if len(parts) >= 2:
        assert merge_count_sum(parts[0], parts[1]) == merge_count_sum(parts[1], parts[0])
    assert merge_count_sum(whole, {}) == whole


def test_builtins_registered():
    for t in BUILTINS:
        assert DEFAULT_REGISTRY.get(t.name) is t
    assert {"csv_parse", "json_parse", "filter_delayed", "reduce_by_carrier"} <= set(
        DEFAULT_REGISTRY.names())


def test_flight_transforms_end_to_end():
    parse = DEFAULT_REGISTRY.get("csv_parse")
    filt = DEFAULT_REGISTRY.get("filter_delayed")
    red = DEFAULT_REGISTRY.get("reduce_by_carrier")
    text = b"AA,2008,1,1,0,12\nAA,2008,1,1,0,-3\nUA,2008,1,1,0,5\nbad line"
    p = apply_transform(parse, parse.init(), text)
    assert p.state == 1 and p.records_out == 3
    f = apply_transform(filt, filt.init(), p.payload)
    assert f.state == ["AA", "UA"]
    assert [r[0] for r in decode_batch(f.payload)] == ["AA", "UA"]
    r = apply_transform(red, red.init(), f.payload)
    assert r.state == {"AA": [1, 12], "UA": [1, 5]}


def test_module_doctest():
    import doctest

    import enclaveflow.dataflow as mod
    result = doctest.testmod(mod)
    assert result.attempted >= 1 and result.failed == 0
