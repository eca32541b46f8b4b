"""Chunk-size, scale-out and mode-comparison experiments."""
from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

from ..enclave import (
    MiB,
    CostModel,
    Direction,
    EnclaveConfig,
    create_enclave,
    crossing_time,
    generate_key,
)
from ..pipeline import Mode, PipelineSpec, await_completion, launch
from ..pipeline.launcher import with_free_ports

DEFAULT_SIZES = tuple(2**k for k in range(8, 21))  # 256 B .. 1 MiB
SWEEP_TOTAL = 100 * MiB
REPETITIONS = 5


def parse_size(text: str) -> int:
    text = text.strip().upper().removesuffix("B")
    mult = {"K": 1024, "M": MiB}.get(text[-1:], 1)
    if text[-1:] in ("K", "M"):
        text = text[:-1]
    return int(float(text) * mult)


def parse_sizes(text: str) -> list[int]:
    """``256..1M`` (powers of two inclusive) or a comma list ``4K,64K``."""
    if ".." in text:
        lo, hi = (parse_size(t) for t in text.split("..", 1))
        if lo < 1 or hi < lo:
            raise ValueError(f"bad size range {text!r}")
        out, s = [], lo
        while s <= hi:
            out.append(s)
            s *= 2
        return out
    return [parse_size(t) for t in text.split(",") if t.strip()]


@dataclass(frozen=True)
class ChunkPoint:
    chunk: int
    direction: Direction
    calls: int
    crossing_time: float
    wall_time: float

    @property
    def throughput(self) -> float:
        """Modelled MiB/s through the call gate."""
        return (self.chunk * self.calls / MiB) / self.crossing_time if self.crossing_time else 0.0


def sweep_chunk(sizes=DEFAULT_SIZES, total: int = SWEEP_TOTAL,
                directions=(Direction.IN, Direction.IN_OUT), cost: CostModel | None = None,
                execute: bool = True) -> list[ChunkPoint]:
    """Move ``total`` bytes across the enclave boundary in fixed-size chunks.

    With ``execute`` the copies really run through ``ecall_copy`` and the
    crossing time is read back from the session; otherwise it is computed
    from the cost model alone.
    """
    cost = cost or CostModel()
    points = []
    for direction in directions:
        for size in sizes:
            calls = max(1, total // size)
            if not execute:
                points.append(ChunkPoint(size, direction, calls,
                                         calls * crossing_time(cost, size, direction), 0.0))
                continue
            buf = bytes(size)
            with create_enclave(EnclaveConfig(generate_key(), cost=cost,
                                              memory_budget=max(size * 2, 1 * MiB))) as enc:
                start = time.perf_counter()
                for _ in range(calls):
                    enc.ecall_copy(buf, direction)
                wall = time.perf_counter() - start
                points.append(ChunkPoint(size, direction, calls,
                                         enc.metrics.simulated_crossing_time, wall))
    return points


def write_chunk_csv(points, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chunk_bytes", "direction", "calls", "crossing_time_s",
                    "wall_time_s", "mib_per_s"])
        for p in points:
            w.writerow([p.chunk, p.direction.name, p.calls, f"{p.crossing_time:.9f}",
                        f"{p.wall_time:.6f}", f"{p.throughput:.3f}"])
    return path


@dataclass(frozen=True)
class TimingPoint:
    label: str
    times: tuple[float, ...]

    @property
    def mean(self) -> float:
        return statistics.fmean(self.times)

    @property
    def std(self) -> float:
        return statistics.stdev(self.times) if len(self.times) > 1 else 0.0

    @property
    def median(self) -> float:
        return statistics.median(self.times)


def _time_run(spec: PipelineSpec, timeout: float | None, **launch_kw) -> float:
    report = await_completion(launch(with_free_ports(spec), **launch_kw), timeout)
    return report.completion_time


def scale_sweep(spec: PipelineSpec, stage: str, counts, repetitions: int = REPETITIONS,
                timeout: float | None = None, **launch_kw) -> list[TimingPoint]:
    """Completion time of ``spec`` with ``stage`` set to each worker count.

    ``stage="all"`` scales every worker stage together.
    """
    out = []
    worker_stages = [s.name for s in spec.stages if s.role.value == "worker"]
    targets = worker_stages if stage == "all" else [stage]
    for n in counts:
        scaled = spec.with_workers({t: n for t in targets})
        times = tuple(_time_run(scaled, timeout, **launch_kw) for _ in range(repetitions))
        out.append(TimingPoint(str(n), times))
    return out


def mode_comparison(spec: PipelineSpec, repetitions: int = 3, modes=tuple(Mode),
                    timeout: float | None = None, **launch_kw) -> list[TimingPoint]:
    """Completion time per security mode, runs interleaved to share drift."""
    times: dict[Mode, list[float]] = {m: [] for m in modes}
    for _ in range(repetitions):
        for m in modes:
            times[m].append(_time_run(spec.with_mode(m), timeout, **launch_kw))
    return [TimingPoint(m.value, tuple(times[m])) for m in modes]
