"""Pipeline-parallel schedule simulation and staleness analysis."""

from .model import (
    ClusterSpec,
    Kind,
    MemoryModel,
    MismatchReport,
    Policy,
    PolicyConfig,
    TaskEvent,
    Timeline,
    Violation,
    validate_causality,
    validate_cluster,
    validate_timeline,
)
from .builder import (
    ScheduleError,
    TaskGraph,
    active_ratio,
    build,
    default_num_pipelines,
    map_stage_to_device,
    preload_count,
)
from .engine import CycleDetected, Deadlock, bubble_ratio, simulate, steady_state_bubble_ratio

__all__ = [
    "ClusterSpec", "Kind", "MemoryModel", "MismatchReport", "Policy", "PolicyConfig",
    "TaskEvent", "Timeline", "Violation", "validate_causality", "validate_cluster",
    "validate_timeline", "ScheduleError", "TaskGraph", "active_ratio", "build",
    "default_num_pipelines", "map_stage_to_device", "preload_count", "CycleDetected",
    "Deadlock", "bubble_ratio", "simulate", "steady_state_bubble_ratio",
]
