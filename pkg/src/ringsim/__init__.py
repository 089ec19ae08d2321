"""Trace-driven Ring ORAM simulator with integrity verification,
channel-level error resilience, and permanent-fault repair."""

from ._kernels import BACKEND as kernel_backend
from .harness import SimConfig, Simulation, StatsReport, generate_trace, parse_trace
from .oram import SCHEME_FEATURES, Features, OramConfig, OramController

__version__ = "0.1.0"

__all__ = [
    "Features",
    "OramConfig",
    "OramController",
    "SCHEME_FEATURES",
    "SimConfig",
    "Simulation",
    "StatsReport",
    "generate_trace",
    "parse_trace",
    "kernel_backend",
]
