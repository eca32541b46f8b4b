"""Declarative pipelines: parse a description, deploy it, collect results."""
from .config import (
    SGX_TAG,
    ConfigSyntaxError,
    Mode,
    ModeError,
    PipelineSpec,
    Role,
    SpecError,
    StageSpec,
    TopologyError,
    load_spec,
    parse_spec,
    shipped_example_path,
    validate,
)
from .launcher import (
    CannotScaleSource,
    Deployment,
    LaunchError,
    LaunchFailure,
    PipelineFailure,
    PipelineReport,
    PipelineTimeout,
    StageStats,
    UnknownStage,
    await_completion,
    free_port,
    launch,
    run_pipeline,
    scale_stage,
    with_free_ports,
)

__all__ = [
    "SGX_TAG", "CannotScaleSource", "ConfigSyntaxError", "Deployment", "LaunchError",
    "LaunchFailure", "Mode", "ModeError", "PipelineFailure", "PipelineReport", "PipelineSpec",
    "PipelineTimeout", "Role", "SpecError", "StageSpec", "StageStats", "TopologyError",
    "UnknownStage", "await_completion", "free_port", "launch", "load_spec", "parse_spec",
    "run_pipeline", "scale_stage", "shipped_example_path", "validate", "with_free_ports",
]
