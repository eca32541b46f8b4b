"""``bench`` command line: datasets, runs, sweeps and reports."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from ..enclave import CostModel, Direction
from ..pipeline import LaunchError, Mode, SpecError, load_spec, shipped_example_path
from .dataset import IoFailure, UnknownLayout, generate_dataset, ingest_bts
from .flights import flights_spec, run_flights
from .kernels import compare_kernels
from .metrics import NoSamples, collect_metrics
from .sweeps import (
    REPETITIONS,
    mode_comparison,
    parse_sizes,
    scale_sweep,
    sweep_chunk,
    write_chunk_csv,
)


def _counts(text: str) -> list[int]:
    try:
        out = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a count list: {text!r}") from None
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("counts must be positive integers")
    return out


def _sizes(text: str) -> list[int]:
    try:
        return parse_sizes(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _ensure_input(args) -> Path:
    path = Path(args.input)
    if not path.exists():
        generate_dataset(path, args.rows, 20, args.seed)
    return path


def _spec(args):
    return load_spec(args.spec) if args.spec else load_spec(shipped_example_path())


def write_result_csv(stats, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["carrier", "delayed_count", "delay_sum", "mean_delay"])
        for s in stats.values():
            mean = "" if s.mean_delay is None else f"{s.mean_delay:.6f}"
            w.writerow([s.carrier, s.delayed_count, s.delay_sum, mean])


def cmd_generate(args) -> int:
    generate_dataset(args.output, args.rows, args.carriers, args.seed)
    print(f"wrote {args.rows} rows to {args.output}")
    return 0


def cmd_ingest(args) -> int:
    kept, dropped = ingest_bts(args.source, args.output)
    print(f"kept {kept} rows, dropped {dropped}")
    return 0


def cmd_run(args) -> int:
    data = _ensure_input(args)
    out_dir = Path(args.out_dir)
    stats_dir = out_dir / "stats"
    stats_dir.mkdir(parents=True, exist_ok=True)
    report, stats = run_flights(data, args.mode, args.workers, spec=_spec(args),
                                timeout=args.timeout, stats_dir=stats_dir, runner=args.runner,
                                realistic_delay=args.realistic_delay)
    write_result_csv(stats, out_dir / "result.csv")
    pct = collect_metrics(stats_dir, out_dir / "report.csv")
    summary = {"mode": report.mode.value, "workers": args.workers,
               "completion_time_s": round(report.completion_time, 4),
               "carriers": len(stats), "intervals": pct.duration,
               "median_p50_bytes": pct.median_p50()}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def cmd_sweep_chunk(args) -> int:
    directions = [Direction[d] for d in args.directions.split(",")]
    points = sweep_chunk(args.sizes, args.total, directions, CostModel(), not args.model_only)
    if args.output:
        write_chunk_csv(points, args.output)
    print("chunk_bytes,direction,calls,crossing_time_s")
    for p in points:
        print(f"{p.chunk},{p.direction.name},{p.calls},{p.crossing_time:.9f}")
    return 0


def _print_timings(label, points) -> None:
    print(f"{label},mean_s,std_s,runs")
    for p in points:
        print(f"{p.label},{p.mean:.4f},{p.std:.4f},{len(p.times)}")


def cmd_scale_sweep(args) -> int:
    data = _ensure_input(args)
    spec = flights_spec(data, args.mode, 1, _spec(args), free_ports=False)
    points = scale_sweep(spec, args.stage, args.counts, args.repetitions, args.timeout,
                         runner=args.runner)
    _print_timings("workers", points)
    return 0


def cmd_modes(args) -> int:
    data = _ensure_input(args)
    spec = flights_spec(data, Mode.CLEAR, args.workers, _spec(args), free_ports=False)
    points = mode_comparison(spec, args.repetitions, timeout=args.timeout, runner=args.runner,
                             realistic_delay=args.realistic_delay)
    print("mode,median_s,mean_s,std_s")
    for p in points:
        print(f"{p.label},{p.median:.4f},{p.mean:.4f},{p.std:.4f}")
    return 0


def cmd_report(args) -> int:
    report = collect_metrics(args.stats_dir, args.output)
    print(f"{len(report.rows)} intervals over {len(report.nodes)} nodes")
    return 0


def cmd_kernels(args) -> int:
    timings = compare_kernels(args.rows, args.repeat)
    by = {(t.kernel, t.backend): t.seconds for t in timings}
    print("kernel,python_s,cython_s,speedup")
    for kernel in dict.fromkeys(t.kernel for t in timings):
        py, cy = by.get((kernel, "python")), by.get((kernel, "cython"))
        ratio = f"{py / cy:.2f}" if py and cy else ""
        print(f"{kernel},{py:.5f},{'' if cy is None else f'{cy:.5f}'},{ratio}")
    return 0


def _run_options(p, workers=True) -> None:
    p.add_argument("--input", default="flights.csv", help="dataset CSV (generated if missing)")
    p.add_argument("--rows", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--spec", help="pipeline file (default: the shipped delayed-flights one)")
    p.add_argument("--runner", choices=["thread", "process"], default="process")
    p.add_argument("--timeout", type=float, default=600.0)
    if workers:
        p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bench", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic flight dataset")
    p.add_argument("output")
    p.add_argument("--rows", type=int, default=100_000)
    p.add_argument("--carriers", type=int, default=20)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("ingest", help="project a BTS on-time file onto the flight schema")
    p.add_argument("source")
    p.add_argument("output")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("run", help="run the delayed-flights pipeline once")
    _run_options(p)
    p.add_argument("--mode", choices=[m.value for m in Mode], default="clear")
    p.add_argument("--out-dir", default="bench-out")
    p.add_argument("--realistic-delay", action="store_true")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep-chunk", help="boundary crossing time against chunk size")
    p.add_argument("--sizes", type=_sizes, default=parse_sizes("256..1M"))
    p.add_argument("--total", type=int, default=100 * 1024 * 1024)
    p.add_argument("--directions", default="IN,IN_OUT")
    p.add_argument("--model-only", action="store_true", help="skip the real copies")
    p.add_argument("--output", help="also write the table as CSV")
    p.set_defaults(fn=cmd_sweep_chunk)

    p = sub.add_parser("scale-sweep", help="completion time against worker count")
    _run_options(p, workers=False)
    p.add_argument("--stage", default="all", help="worker stage to scale, or 'all'")
    p.add_argument("--counts", type=_counts, default=[1, 2, 4])
    p.add_argument("--mode", choices=[m.value for m in Mode], default="clear")
    p.add_argument("--repetitions", type=int, default=REPETITIONS)
    p.set_defaults(fn=cmd_scale_sweep)

    p = sub.add_parser("modes", help="completion time of the three security modes")
    _run_options(p)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--realistic-delay", action="store_true")
    p.set_defaults(fn=cmd_modes)

    p = sub.add_parser("report", help="stacked percentiles from a stats directory")
    p.add_argument("stats_dir")
    p.add_argument("--output")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("kernels", help="compiled vs pure-Python kernel timings")
    p.add_argument("--rows", type=int, default=50_000)
    p.add_argument("--repeat", type=int, default=3)
    p.set_defaults(fn=cmd_kernels)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (SpecError, UnknownLayout, ValueError) as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 2
    except (LaunchError, NoSamples, IoFailure, OSError) as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
