"""Benchmark and evaluation harness."""

from .data import DataError, Dataset, clustered, export, ingest, uniform
from .metrics import brute_force_knn, candidate_overhead, error_ratio
from .workload import LockedEngine, MetricsReport, WorkloadSpec, run_workload

__all__ = [
    "DataError", "Dataset", "LockedEngine", "MetricsReport", "WorkloadSpec", "brute_force_knn",
    "candidate_overhead", "clustered", "error_ratio", "export", "ingest", "run_workload", "uniform",
]
