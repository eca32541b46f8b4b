"""Pure-Python versions of the hot loops.

Every function here has a twin in ``_speedups.pyx`` with the same signature
and results; ``enclaveflow.kernels`` picks one at import time.
"""
from struct import Struct

_LEN = Struct(">I")
_BODY = Struct(">IQB")

HEADER_SIZE = 13


def split_frames(buf, offset=0):
    """Cut every complete length-prefixed frame out of ``buf``.

    Returns ``(frames, end)`` where ``frames`` is a list of
    ``(stream_id, seq_no, flags, payload)`` tuples and ``end`` is the offset
    just past the last complete frame. Raises ValueError on a declared length
    below the fixed header size.
    """
    frames = []
    n = len(buf)
    pos = offset
    while n - pos >= 4:
        (total,) = _LEN.unpack_from(buf, pos)
        if total < HEADER_SIZE:
            raise ValueError(f"declared frame length {total} < {HEADER_SIZE}")
        if n - pos - 4 < total:
            break
        sid, seq, flags = _BODY.unpack_from(buf, pos + 4)
        frames.append((sid, seq, flags, bytes(buf[pos + 17:pos + 4 + total])))
        pos += 4 + total
    return frames, pos


def convert_rows(rows, types):
    """Convert tokenized CSV rows to typed records.

    ``types`` is a string of type codes, one per column: ``s`` string,
    ``i`` integer, ``f`` float. Empty numeric cells become None. Rows with the
    wrong arity or an unparsable number are dropped and counted.
    """
    arity = len(types)
    out = []
    bad = 0
    for row in rows:
        if len(row) != arity:
            bad += 1
            continue
        rec = []
        try:
            for code, cell in zip(types, row):
                if code == "s":
                    rec.append(cell)
                elif cell == "":
                    rec.append(None)
                elif code == "i":
                    rec.append(int(cell))
                else:
                    rec.append(float(cell))
        except ValueError:
            bad += 1
            continue
        out.append(rec)
    return out, bad


def filter_gt(records, index, threshold):
    return [r for r in records if r[index] is not None and r[index] > threshold]


def fold_count_sum(state, records, key_index, value_index):
    """Add each record's value into ``state[key] = [count, sum]`` in place."""
    for r in records:
        v = r[value_index]
        if v is None:
            continue
        acc = state.get(r[key_index])
        if acc is None:
            state[r[key_index]] = [1, v]
        else:
            acc[0] += 1
            acc[1] += v
    return state
