"""``router`` and ``pipeline`` command lines."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict

from .bench.metrics import ThroughputMeter
from .pipeline import (
    LaunchError,
    Mode,
    PipelineFailure,
    PipelineTimeout,
    SpecError,
    await_completion,
    launch,
    load_spec,
)
from .routing import RouterConfig, StalledStream, run_router
from .transforms import UnknownTransform
from .wire import Endpoint, WireError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


def _endpoint(text: str) -> Endpoint:
    try:
        return Endpoint.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def router_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="router", description="Forward frames between stages.")
    ap.add_argument("--in", dest="inbound", type=_endpoint, required=True)
    ap.add_argument("--out", dest="outbound", type=_endpoint, required=True)
    ap.add_argument("--expected-upstreams", type=int, default=1)
    ap.add_argument("--stats", help="append per-second throughput rows to this CSV")
    ap.add_argument("--name", default="router")
    ap.add_argument("--idle-timeout", type=float)
    args = ap.parse_args(argv)
    try:
        config = RouterConfig(args.inbound, args.outbound, args.name)
    except ValueError as exc:
        print(f"router: {exc}", file=sys.stderr)
        return EXIT_INVALID
    meter = ThroughputMeter(args.stats, args.name) if args.stats else None
    try:
        report = run_router(config, args.expected_upstreams, meter=meter,
                            idle_timeout=args.idle_timeout)
    except (WireError, StalledStream, OSError) as exc:
        print(f"router: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(report.as_dict()))
    return EXIT_OK


def _worker_counts(items) -> dict[str, int]:
    out = {}
    for item in items or ():
        name, sep, count = item.partition("=")
        if not sep or not count.isdigit():
            raise argparse.ArgumentTypeError(f"--workers expects stage=N, got {item!r}")
        out[name] = int(count)
    return out


def _jsonable(value):
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def pipeline_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="pipeline", description="Validate and run pipelines.")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="launch a pipeline and wait for it to finish")
    run.add_argument("spec")
    run.add_argument("--mode", choices=[m.value for m in Mode])
    run.add_argument("--workers", nargs="*", metavar="STAGE=N")
    run.add_argument("--stats-dir")
    run.add_argument("--data-file", help="override every source's data_file")
    run.add_argument("--runner", choices=["thread", "process"], default="process")
    run.add_argument("--timeout", type=float)
    run.add_argument("--realistic-delay", action="store_true")
    check = sub.add_parser("check", help="validate a pipeline file")
    check.add_argument("spec")
    args = ap.parse_args(argv)
    try:
        spec = load_spec(args.spec)
        if args.command == "check":
            print(f"{args.spec}: {len(spec.stages)} stages, mode {spec.mode.value}")
            return EXIT_OK
        if args.mode:
            spec = spec.with_mode(args.mode)
        spec = spec.with_workers(_worker_counts(args.workers))
        if args.data_file:
            spec = spec.with_data_file(args.data_file)
    except (SpecError, UnknownTransform, argparse.ArgumentTypeError, OSError) as exc:
        print(f"pipeline: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        dep = launch(spec, runner=args.runner, stats_dir=args.stats_dir,
                     realistic_delay=args.realistic_delay)
        report = await_completion(dep, args.timeout)
    except PipelineTimeout as exc:
        print(f"pipeline: {exc}", file=sys.stderr)
        print(json.dumps(exc.snapshot, indent=2), file=sys.stderr)
        return EXIT_RUNTIME
    except (LaunchError, PipelineFailure) as exc:
        print(f"pipeline: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    summary = {"mode": report.mode.value, "completion_time": report.completion_time,
               "stages": {k: asdict(v) for k, v in report.stages.items()},
               "result": _jsonable(report.result)}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    """``enclaveflow router ...`` / ``enclaveflow pipeline ...`` / ``enclaveflow bench ...``"""
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    tools = {"router": router_main, "pipeline": pipeline_main}
    if not argv or argv[0] not in (*tools, "bench"):
        print("usage: enclaveflow {router,pipeline,bench} ...", file=sys.stderr)
        return EXIT_INVALID
    if argv[0] == "bench":
        from .bench.cli import main as bench_main
        return bench_main(argv[1:])
    return tools[argv[0]](argv[1:])


if __name__ == "__main__":
    sys.exit(main())
