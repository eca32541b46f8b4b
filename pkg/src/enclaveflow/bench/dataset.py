"""Flight datasets: a seeded synthetic generator and a BTS on-time importer."""
from __future__ import annotations

import csv
import random
from pathlib import Path

from ..dataflow import FLIGHT_SCHEMA

CARRIERS = (
    "AA", "AQ", "AS", "B6", "CO", "DL", "EV", "F9", "FL", "HA",
    "MQ", "NW", "OH", "OO", "UA", "US", "WN", "XE", "YV", "9E",
)
DELAYED_FRACTION = 0.4


class IoFailure(OSError):
    pass


class UnknownLayout(ValueError):
    pass


def carrier_codes(count: int) -> list[str]:
    if count < 1:
        raise ValueError("need at least one carrier")
    codes = list(CARRIERS[:count])
    n = len(codes)
    while len(codes) < count:
        codes.append(f"C{n:03d}")
        n += 1
    return codes


def generate_dataset(path, rows: int, carriers: int = 20, seed: int = 0,
                     year: int = 2008) -> Path:
    """Write ``rows`` synthetic flights; about 40 % arrive late.

    Output is a pure function of the arguments.
    """
    if rows < 0:
        raise ValueError("rows must be >= 0")
    codes = carrier_codes(carriers)
    rng = random.Random(seed)
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(FLIGHT_SCHEMA.names)
            for _ in range(rows):
                if rng.random() < DELAYED_FRACTION:
                    arr = rng.randint(1, 240)
                else:
                    arr = rng.randint(-45, 0)
                dep = arr + rng.randint(-15, 15)
                out.writerow((rng.choice(codes), year, rng.randint(1, 12), rng.randint(1, 28),
                              dep, arr))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


# BTS column aliases across the historic and current download layouts.
_BTS_COLUMNS = {
    "carrier": ("UniqueCarrier", "Reporting_Airline", "OP_UNIQUE_CARRIER", "Carrier"),
    "year": ("Year",),
    "month": ("Month",),
    "day": ("DayofMonth", "DayOfMonth", "DAY_OF_MONTH"),
    "dep_delay": ("DepDelay", "DEP_DELAY"),
    "arr_delay": ("ArrDelay", "ARR_DELAY"),
}


def _locate(header: list[str]) -> dict[str, int]:
    folded = {h.strip().strip('"').lower(): i for i, h in enumerate(header)}
    where = {}
    for field, names in _BTS_COLUMNS.items():
        for n in names:
            if n.lower() in folded:
                where[field] = folded[n.lower()]
                break
        else:
            raise UnknownLayout(f"no column for {field} (looked for {', '.join(names)})")
    return where


def _minutes(text: str) -> int:
    return int(float(text))


def ingest_bts(src, dst) -> tuple[int, int]:
    """Project a BTS on-time file onto the flight schema.

    Columns are found by header name, so their order does not matter. Rows
    with a missing or unparsable field are dropped. Returns (kept, dropped).
    """
    kept = dropped = 0
    try:
        with open(src, newline="", encoding="utf-8") as fin:
            reader = csv.reader(fin)
            header = next(reader, None)
            if not header:
                raise UnknownLayout(f"{src} has no header row")
            cols = _locate(header)
            order = [cols[f] for f in FLIGHT_SCHEMA.names]
            with open(dst, "w", newline="", encoding="utf-8") as fout:
                out = csv.writer(fout, lineterminator="\n")
                out.writerow(FLIGHT_SCHEMA.names)
                for row in reader:
                    if not row:
                        continue
                    try:
                        cells = [row[i].strip() for i in order]
                        if not cells[0]:
                            raise ValueError("empty carrier")
                        values = [cells[0]] + [_minutes(c) for c in cells[1:]]
                        if not 1 <= values[2] <= 12:
                            raise ValueError("month out of range")
                    except (IndexError, ValueError):
                        dropped += 1
                        continue
                    out.writerow(values)
                    kept += 1
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return kept, dropped
