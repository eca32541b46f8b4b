"""Reference implementations written independently of the package code.

Nothing here imports enclaveflow; each function is the plainest possible
restatement of a rule the package implements with more machinery.
"""
import math


def frame_bytes(stream_id, seq_no, flags, payload):
    """Frame layout built byte by byte, no struct module."""
    total = 13 + len(payload)
    return (total.to_bytes(4, "big") + stream_id.to_bytes(4, "big")
            + seq_no.to_bytes(8, "big") + bytes([flags]) + bytes(payload))


def round_robin(n_frames, n_peers, start=0):
    """Peer index receiving each frame."""
    return [(start + i) % n_peers for i in range(n_frames)]


def fair_queue_order(queues, cursor=-1):
    """Serve a list of FIFO lists in rotation starting after ``cursor``."""
    queues = [list(q) for q in queues]
    out = []
    while any(queues):
        for step in range(1, len(queues) + 1):
            i = (cursor + step) % len(queues)
            if queues[i]:
                out.append(queues[i].pop(0))
                cursor = i
                break
    return out


def crossing_seconds(per_call, per_byte_in, per_byte_out, nbytes, round_trip):
    return per_call + nbytes * per_byte_in + (nbytes * per_byte_out if round_trip else 0.0)


def percentile_nearest_rank(values, pct):
    """Smallest value whose cumulative share of the sample reaches ``pct``."""
    ordered = sorted(values)
    n = len(ordered)
    for v in ordered:
        if sum(1 for x in ordered if x <= v) * 100 >= pct * n:
            return v
    return ordered[-1]


def rfc4180_split(text):
    """Tokenise CSV text with a hand-written state machine (RFC 4180)."""
    rows, row, field = [], [], []
    i, quoted, n = 0, False, len(text)
    started = False
    while i < n:
        c = text[i]
        if quoted:
            if c == '"':
                if i + 1 < n and text[i + 1] == '"':
                    field.append('"')
                    i += 1
                else:
                    quoted = False
            else:
                field.append(c)
        elif c == '"':
            quoted = True
            started = True
        elif c == ",":
            row.append("".join(field))
            field = []
            started = True
        elif c in "\r\n":
            if c == "\r" and i + 1 < n and text[i + 1] == "\n":
                i += 1
            if started or field or row:
                row.append("".join(field))
                rows.append(row)
            row, field, started = [], [], False
        else:
            field.append(c)
            started = True
        i += 1
    if started or field or row:
        row.append("".join(field))
        rows.append(row)
    return rows


def delayed_by_carrier(lines):
    """carrier -> [late count, late minutes] from flight CSV lines (no header)."""
    out = {}
    for line in lines:
        parts = line.split(",")
        if len(parts) != 6:
            continue
        try:
            arr = int(parts[5])
            [int(p) for p in parts[1:5]]
        except ValueError:
            continue
        acc = out.setdefault(parts[0], [0, 0])
        if arr > 0:
            acc[0] += 1
            acc[1] += arr
    return out


def close(a, b, rel=1e-9):
    return math.isclose(a, b, rel_tol=rel, abs_tol=0.0) or a == b
