"""Simulated multi-worker execution: data parallelism and bond-split tensor parallelism."""

from .fabric import CollectiveGroup, CommModel, CommStats, Communicator, PlanningError, WorkerFailure
from .schemes import (
    ParallelResult,
    ShardedGamma,
    padded_bond_dims,
    run_data_parallel,
    run_tensor_parallel_double_site,
    run_tensor_parallel_single_site,
    shard_bounds,
    shard_gamma,
)

__all__ = [
    "CollectiveGroup",
    "CommModel",
    "CommStats",
    "Communicator",
    "ParallelResult",
    "PlanningError",
    "ShardedGamma",
    "WorkerFailure",
    "padded_bond_dims",
    "run_data_parallel",
    "run_tensor_parallel_double_site",
    "run_tensor_parallel_single_site",
    "shard_bounds",
    "shard_gamma",
]
