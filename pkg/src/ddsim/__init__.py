"""Distributed diagnosis of zero-day compromises in simulated IoT fleets."""

from .config import Mode, ScenarioConfig, load_config, parse_config, serialize_config
from .metrics import RunMetrics, Transcript, compare_modes, compute_metrics
from .simnet import build_topology, mode_pipeline, run

__all__ = [
    "Mode", "ScenarioConfig", "load_config", "parse_config", "serialize_config",
    "RunMetrics", "Transcript", "compare_modes", "compute_metrics",
    "build_topology", "mode_pipeline", "run",
]
__version__ = "0.1.0"
