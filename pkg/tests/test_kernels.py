import os
import subprocess
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enclaveflow import kernels
from enclaveflow import _pykernels
from enclaveflow.wire import Flags, Frame, encode_frame

BACKENDS = kernels.backends()


def test_compiled_backend_present():
    assert "cython" in BACKENDS, "extension did not build"
    assert kernels.BACKEND in BACKENDS


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_split_frames_partial_tail(name):
    mod = BACKENDS[name]
    a = encode_frame(Frame(1, 2, Flags.ENCRYPTED, b"abc"))
    b = encode_frame(Frame.end_of_stream(1, 3))
    buf = bytearray(a + b[:5])
    got, end = mod.split_frames(buf)
    assert got == [(1, 2, 2, b"abc")] and end == len(a)
    with pytest.raises(ValueError):
        mod.split_frames(bytearray((4).to_bytes(4, "big") + bytes(13)))


cells = st.one_of(st.integers(-10**6, 10**6).map(str), st.just(""), st.just("x1"),
                  st.text("AB", min_size=1, max_size=3))
rows = st.lists(st.lists(cells, min_size=4, max_size=6), max_size=30)


@settings(max_examples=200)
@given(rows)
def test_convert_rows_parity(rs):
    results = {n: m.convert_rows([list(r) for r in rs], "sii" + "i" * 2 + "f")
               for n, m in BACKENDS.items()}
    ref = results["python"]
    for got in results.values():
        assert got == ref


@settings(max_examples=200)
@given(st.lists(st.tuples(st.sampled_from("ABC"), st.one_of(st.none(), st.integers(-50, 50))),
                max_size=50))
def test_filter_and_fold_parity(pairs):
    records = [[k, v] for k, v in pairs]
    for mod in BACKENDS.values():
        assert mod.filter_gt(records, 1, 0) == _pykernels.filter_gt(records, 1, 0)
        assert mod.fold_count_sum({}, records, 0, 1) == _pykernels.fold_count_sum({}, records, 0, 1)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1),
                          st.binary(max_size=64)), max_size=20),
       st.integers(0, 20))
def test_split_frames_parity(items, cut):
    buf = b"".join(encode_frame(Frame(s, q, payload=p)) for s, q, p in items)
    buf = bytearray(buf[:max(0, len(buf) - cut)])
    outs = {n: m.split_frames(buf) for n, m in BACKENDS.items()}
    assert len({repr(o) for o in outs.values()}) == 1


def test_fold_is_in_place_and_skips_missing():
    state = {"AA": [1, 5]}
    out = _pykernels.fold_count_sum(state, [["AA", 3], ["UA", None], ["UA", 2]], 0, 1)
    assert out is state
    assert state == {"AA": [2, 8], "UA": [1, 2]}


def test_pure_fallback_selected_by_env(tmp_path):
    code = ("import enclaveflow, enclaveflow.kernels as k; "
            "from enclaveflow.bench import generate_dataset, oracle, delayed_flights_result; "
            f"p = generate_dataset({str(tmp_path / 'f.csv')!r}, 500, 4, 1); "
            "assert delayed_flights_result(p, via='pipeline', mode='enclave', timeout=60) "
            "== oracle(p); print(k.BACKEND)")
    env = {**os.environ, "ENCLAVEFLOW_PURE": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert out.stdout.strip() == "python"
