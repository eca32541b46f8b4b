"""Compiled vs pure-Python timings for the hot kernels."""
from __future__ import annotations

import csv
import io
import random
import time
from dataclasses import dataclass

from .. import kernels
from ..dataflow import FLIGHT_SCHEMA
from ..wire import Frame, encode_frame


@dataclass(frozen=True)
class KernelTiming:
    kernel: str
    backend: str
    seconds: float


def _workload(rows: int, seed: int):
    rng = random.Random(seed)
    text = io.StringIO()
    w = csv.writer(text, lineterminator="\n")
    for _ in range(rows):
        w.writerow((rng.choice("ABCDEFGHIJ") + "X", 2008, rng.randint(1, 12),
                    rng.randint(1, 28), rng.randint(-30, 200), rng.randint(-30, 200)))
    tokens = list(csv.reader(text.getvalue().splitlines()))
    wire = b"".join(encode_frame(Frame(i % 4, i, 0, bytes(rng.randrange(256) for _ in range(64))))
                    for i in range(rows // 4))
    return tokens, wire


def _best(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def compare_kernels(rows: int = 50_000, repeat: int = 3, seed: int = 7) -> list[KernelTiming]:
    tokens, wire = _workload(rows, seed)
    codes = FLIGHT_SCHEMA.codes
    out = []
    for name, mod in kernels.backends().items():
        records, _ = mod.convert_rows(tokens, codes)
        jobs = {
            "split_frames": lambda: mod.split_frames(wire),
            "convert_rows": lambda: mod.convert_rows(tokens, codes),
            "filter_gt": lambda: mod.filter_gt(records, 5, 0),
            "fold_count_sum": lambda: mod.fold_count_sum({}, records, 0, 5),
        }
        for kernel, job in jobs.items():
            out.append(KernelTiming(kernel, name, _best(job, repeat)))
    return out
