"""Multi-tenant cluster simulation with static, elastic and heterogeneous policies."""

from .jobs import CATALOG, Job, Workload, dump_trace, load_trace, poisson_trace
from .policies import (RoundGrant, ShareRequest, WfsDecision, compute_fair_shares,
                       het_round_allocate, static_schedule, wfs_schedule)
from .sim import (KIND_RANK, POLICIES, Allocation, ClusterEvent, JobRecord, TraceMetrics,
                  run_simulation)

__all__ = [
    "CATALOG", "Job", "Workload", "dump_trace", "load_trace", "poisson_trace",
    "RoundGrant", "ShareRequest", "WfsDecision", "compute_fair_shares", "het_round_allocate",
    "static_schedule", "wfs_schedule", "KIND_RANK", "POLICIES", "Allocation", "ClusterEvent",
    "JobRecord", "TraceMetrics", "run_simulation",
]
