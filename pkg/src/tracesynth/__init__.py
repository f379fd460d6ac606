"""Trace-driven SQL workload synthesizer.

Given anonymized per-query execution targets (CPU time, scanned bytes) and
structural constraints (join/aggregate/sort counts), generates executable
SQL over a proxy dataset whose measured execution matches those targets.
"""

__version__ = "0.1.0"

from .catalog import Catalog, gen_synthetic_catalog, load_catalog, load_dataset
from .backend import BackendConfig, ExecutionProfile, SimulatedBackend
from .pipeline import PipelineConfig, synthesize_workload
from .pool import QueryPool
from .querygraph import QueryGraph, graph_hash, structural_counts
from .trace import TraceRecord, gen_synthetic_trace, load_trace, qerror

__all__ = [
    "Catalog", "gen_synthetic_catalog", "load_catalog", "load_dataset",
    "BackendConfig", "ExecutionProfile", "SimulatedBackend",
    "PipelineConfig", "synthesize_workload",
    "QueryPool",
    "QueryGraph", "graph_hash", "structural_counts",
    "TraceRecord", "gen_synthetic_trace", "load_trace", "qerror",
]
