"""Per-node throughput sampling and stacked-percentile reports.

Stats files hold ``timestamp_ms,node,bytes_out`` rows, one per node per
1 s interval (idle intervals are written as 0). Reports hold
``interval,min,p25,p50,p75,max`` rows of bytes_out across nodes, using
nearest-rank percentiles.
"""
from __future__ import annotations

import csv
import math
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

STATS_HEADER = ["timestamp_ms", "node", "bytes_out"]
REPORT_HEADER = ["interval", "min", "p25", "p50", "p75", "max"]


class NoSamples(Exception):
    pass


class ThroughputMeter:
    """Counts bytes out and writes one row per elapsed interval."""

    def __init__(self, path, node: str, t0: float | None = None, interval: float = 1.0,
                 clock=time.time):
        self.path = Path(path)
        self.node = node
        self.clock = clock
        self.t0 = clock() if t0 is None else t0
        self.interval = interval
        self._bucket = self._index(clock())
        self._bytes = 0
        self._closed = False
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="", encoding="utf-8")
        self._out = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._out.writerow(STATS_HEADER)

    def _index(self, now: float) -> int:
        return max(0, int((now - self.t0) // self.interval))

    def _emit(self, bucket: int, nbytes: int) -> None:
        self._out.writerow([int(bucket * self.interval * 1000), self.node, nbytes])

    def add(self, nbytes: int) -> None:
        k = self._index(self.clock())
        if k > self._bucket:
            self._emit(self._bucket, self._bytes)
            for idle in range(self._bucket + 1, k):
                self._emit(idle, 0)
            self._bucket, self._bytes = k, 0
        self._bytes += nbytes

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.add(0)
        self._emit(self._bucket, self._bytes)
        self._fh.close()


def nearest_rank(sorted_values, pct: float):
    """Nearest-rank percentile of an ascending sequence (pct in [0, 100])."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("no values")
    if pct <= 0:
        return sorted_values[0]
    rank = math.ceil(pct / 100.0 * n)
    return sorted_values[min(n, rank) - 1]


@dataclass(frozen=True)
class IntervalStats:
    interval: int
    min: int
    p25: int
    p50: int
    p75: int
    max: int

    def row(self) -> list:
        return [self.interval, self.min, self.p25, self.p50, self.p75, self.max]


@dataclass
class PercentileReport:
    rows: list[IntervalStats]
    nodes: list[str]
    totals: dict[str, int]

    @property
    def duration(self) -> int:
        """Number of 1 s intervals covered."""
        return (self.rows[-1].interval + 1) if self.rows else 0

    def median_p50(self) -> float:
        vals = sorted(r.p50 for r in self.rows)
        return nearest_rank(vals, 50) if vals else 0

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow(r.row())
        return path


def read_samples(paths) -> list[tuple[int, str, int]]:
    """Rows of every stats file in ``paths``; other CSV files are skipped."""
    samples = []
    for p in paths:
        with open(p, newline="", encoding="utf-8") as fh:
            rows = csv.DictReader(fh)
            if rows.fieldnames != STATS_HEADER:
                continue
            for row in rows:
                samples.append((int(row["timestamp_ms"]), row["node"], int(row["bytes_out"])))
    return samples


def percentile_report(samples, interval_ms: int = 1000) -> PercentileReport:
    if not samples:
        raise NoSamples("no throughput samples")
    per_interval: dict[int, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    totals: dict[str, int] = defaultdict(int)
    for ts, node, nbytes in samples:
        per_interval[ts // interval_ms][node] += nbytes
        totals[node] += nbytes
    rows = []
    for k in sorted(per_interval):
        vals = sorted(per_interval[k].values())
        rows.append(IntervalStats(k, vals[0], nearest_rank(vals, 25), nearest_rank(vals, 50),
                                  nearest_rank(vals, 75), vals[-1]))
    return PercentileReport(rows, sorted(totals), dict(totals))


def collect_metrics(stats_dir, report_path=None) -> PercentileReport:
    """Read every ``*.csv`` stats file in ``stats_dir`` and build the report.

    Writes ``report.csv`` next to them unless ``report_path`` says otherwise.
    """
    stats_dir = Path(stats_dir)
    paths = sorted(p for p in stats_dir.glob("*.csv") if p.name != "report.csv")
    report = percentile_report(read_samples(paths))
    report.write_csv(report_path or stats_dir / "report.csv")
    return report
