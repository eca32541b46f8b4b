"""The delayed-flights application: per-carrier count and sum of late arrivals.

A flight is delayed when its arrival delay is strictly positive. Every
carrier that appears in the input is reported, including those that were
never late.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from ..pipeline import Mode, PipelineSpec, await_completion, launch, load_spec, shipped_example_path
from ..pipeline.launcher import PipelineReport, with_free_ports


@dataclass(frozen=True)
class CarrierStats:
    carrier: str
    delayed_count: int = 0
    delay_sum: float = 0

    @property
    def mean_delay(self) -> float | None:
        return self.delay_sum / self.delayed_count if self.delayed_count else None


def oracle(path) -> dict[str, CarrierStats]:
    """Single-threaded reference fold over the CSV file."""
    counts: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        for row in rows:
            if len(row) != 6:
                continue
            try:
                # Empty numeric cells are missing values, not bad rows.
                nums = [int(c) if c != "" else None for c in row[1:]]
            except ValueError:
                continue
            carrier, arr = row[0], nums[4]
            acc = counts.setdefault(carrier, [0, 0])
            if arr is not None and arr > 0:
                acc[0] += 1
                acc[1] += arr
    return {c: CarrierStats(c, n, s) for c, (n, s) in sorted(counts.items())}


def stats_from_report(report: PipelineReport, spec: PipelineSpec) -> dict[str, CarrierStats]:
    """Combine the filter's carrier set with the reducer's count/sum state."""
    seen: set[str] = set()
    for s in spec.stages:
        if s.transform == "filter_delayed":
            seen.update(report.stage_states.get(s.name) or [])
    reduced = report.result or {}
    seen.update(reduced)
    return {c: CarrierStats(c, *reduced.get(c, (0, 0))) for c in sorted(seen)}


def flights_spec(data_file, mode: Mode | str = Mode.CLEAR, workers: int = 1,
                 spec: PipelineSpec | None = None, free_ports: bool = True) -> PipelineSpec:
    """The shipped topology, pointed at ``data_file`` with ``workers`` per worker stage."""
    spec = spec or load_spec(shipped_example_path())
    counts = {s.name: workers for s in spec.stages if s.role.value == "worker"}
    spec = spec.with_data_file(Path(data_file)).with_mode(Mode(mode)).with_workers(counts)
    return with_free_ports(spec) if free_ports else spec


def delayed_flights_result(path, via: str = "oracle", *, mode: Mode | str = Mode.CLEAR,
                           workers: int = 1, spec: PipelineSpec | None = None,
                           timeout: float | None = None, **launch_kw) -> dict[str, CarrierStats]:
    if via == "oracle":
        return oracle(path)
    if via != "pipeline":
        raise ValueError("via must be 'oracle' or 'pipeline'")
    spec = flights_spec(path, mode, workers, spec)
    report = await_completion(launch(spec, **launch_kw), timeout)
    return stats_from_report(report, spec)


def run_flights(path, mode: Mode | str = Mode.CLEAR, workers: int = 1, *,
                spec: PipelineSpec | None = None, timeout: float | None = None,
                **launch_kw) -> tuple[PipelineReport, dict[str, CarrierStats]]:
    spec = flights_spec(path, mode, workers, spec)
    report = await_completion(launch(spec, **launch_kw), timeout)
    return report, stats_from_report(report, spec)
