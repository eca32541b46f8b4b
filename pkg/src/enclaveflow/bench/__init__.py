"""Delayed-flights benchmark application, datasets, sweeps and metrics."""
from .dataset import CARRIERS, IoFailure, UnknownLayout, generate_dataset, ingest_bts
from .flights import CarrierStats, delayed_flights_result, flights_spec, oracle, run_flights
from .metrics import (
    NoSamples,
    PercentileReport,
    ThroughputMeter,
    collect_metrics,
    nearest_rank,
    percentile_report,
)
from .sweeps import ChunkPoint, TimingPoint, mode_comparison, scale_sweep, sweep_chunk

__all__ = [
    "CARRIERS", "CarrierStats", "ChunkPoint", "IoFailure", "NoSamples", "PercentileReport",
    "ThroughputMeter", "TimingPoint", "UnknownLayout", "collect_metrics",
    "delayed_flights_result", "flights_spec", "generate_dataset", "ingest_bts",
    "mode_comparison", "nearest_rank", "oracle", "percentile_report", "run_flights",
    "scale_sweep", "sweep_chunk",
]
