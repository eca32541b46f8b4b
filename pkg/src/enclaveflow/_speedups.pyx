# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled twins of ``enclaveflow._pykernels``; results must match exactly."""

cdef enum:
    HEADER_SIZE = 13


cdef inline unsigned long long _be(const unsigned char[:] b, Py_ssize_t pos, int width) noexcept nogil:
    cdef unsigned long long v = 0
    cdef int i
    for i in range(width):
        v = (v << 8) | b[pos + i]
    return v


def split_frames(buf, Py_ssize_t offset=0):
    cdef const unsigned char[:] view = buf
    cdef Py_ssize_t n = view.shape[0]
    cdef Py_ssize_t pos = offset
    cdef unsigned long long total
    cdef list frames = []
    while n - pos >= 4:
        total = _be(view, pos, 4)
        if total < HEADER_SIZE:
            raise ValueError(f"declared frame length {total} < {HEADER_SIZE}")
        if <unsigned long long>(n - pos - 4) < total:
            break
        frames.append((
            <unsigned int>_be(view, pos + 4, 4),
            _be(view, pos + 8, 8),
            view[pos + 16],
            bytes(view[pos + 17:pos + 4 + <Py_ssize_t>total]),
        ))
        pos += 4 + <Py_ssize_t>total
    return frames, pos


def convert_rows(list rows, str types):
    cdef Py_ssize_t arity = len(types)
    cdef Py_ssize_t j
    cdef list out = []
    cdef list rec
    cdef list row
    cdef Py_ssize_t bad = 0
    cdef Py_UCS4 code
    cdef str cell
    cdef bint ok
    for row in rows:
        if len(row) != arity:
            bad += 1
            continue
        rec = []
        ok = True
        for j in range(arity):
            code = types[j]
            cell = row[j]
            if code == u"s":
                rec.append(cell)
            elif len(cell) == 0:
                rec.append(None)
            else:
                try:
                    if code == u"i":
                        rec.append(int(cell))
                    else:
                        rec.append(float(cell))
                except ValueError:
                    ok = False
                    break
        if ok:
            out.append(rec)
        else:
            bad += 1
    return out, bad


def filter_gt(list records, Py_ssize_t index, threshold):
    cdef list out = []
    cdef list r
    for r in records:
        v = r[index]
        if v is not None and v > threshold:
            out.append(r)
    return out


def fold_count_sum(dict state, list records, Py_ssize_t key_index, Py_ssize_t value_index):
    cdef list r
    cdef list acc
    for r in records:
        v = r[value_index]
        if v is None:
            continue
        k = r[key_index]
        acc = state.get(k)
        if acc is None:
            state[k] = [1, v]
        else:
            acc[0] += 1
            acc[1] += v
    return state
