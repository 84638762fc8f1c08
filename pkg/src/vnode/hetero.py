"""Heterogeneous batch assignment.

Profiles give a step time per device type and micro-batch size. The solver
picks, for every device type, how many devices to use, the per-device batch
and how many virtual nodes to split it into, so that the slowest type finishes
as early as possible while the per-device batches add up to the global batch.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import ModelSpec, _philox, forward_backward, init_model, StatefulKernelState, \
    synth_dataset, task_for

log = logging.getLogger(__name__)

MAX_VIRTUAL_NODES = 64
PROFILE_STEPS = 20
WARMUP_STEPS = 4


class InterpolationError(KeyError):
    """A step time was requested for a batch size that was never profiled."""


class InfeasibleError(ValueError):
    """No assignment satisfies the batch-size constraint."""


def candidate_batch_sizes(max_b: int) -> list[int]:
    """Powers of two up to ``max_b`` plus the midpoints 3 * 2**(k-1)."""
    if max_b < 1:
        raise ValueError("max_b must be at least 1")
    out = set()
    p = 1
    while p <= max_b:
        out.add(p)
        if p >= 2 and p + p // 2 <= max_b:
            out.add(p + p // 2)
        p *= 2
    return sorted(out)


def virtual_node_counts(cap: int = MAX_VIRTUAL_NODES) -> list[int]:
    return [1 << k for k in range(cap.bit_length()) if (1 << k) <= cap]


@dataclass(frozen=True)
class DeviceModel:
    """Synthetic cost model of one device type.

    One step on ``b`` examples costs ``fixed_overhead_s + per_example_s * b``;
    running on two or more devices adds ``allreduce_s``. The first
    ``slow_steps`` steps are ``slow_factor`` times slower.
    """

    device_type: str
    fixed_overhead_s: float = 0.0
    per_example_s: float = 1e-3
    allreduce_s: float = 0.0
    slow_factor: float = 1.0
    slow_steps: int = 0

    def step_time(self, batch_size: int, num_devices: int = 1, step: int | None = None) -> float:
        t = self.fixed_overhead_s + self.per_example_s * batch_size
        if num_devices > 1:
            t += self.allreduce_s
        if step is not None and step < self.slow_steps:
            t *= self.slow_factor
        return t

    def scaled(self, factor: float, device_type: str | None = None) -> "DeviceModel":
        """A model ``factor`` times slower in every term."""
        return DeviceModel(device_type or self.device_type, self.fixed_overhead_s * factor,
                           self.per_example_s * factor, self.allreduce_s * factor,
                           self.slow_factor, self.slow_steps)

    def to_dict(self) -> dict:
        return {"device_type": self.device_type, "fixed_overhead_s": self.fixed_overhead_s,
                "per_example_s": self.per_example_s, "allreduce_s": self.allreduce_s,
                "slow_factor": self.slow_factor, "slow_steps": self.slow_steps}

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceModel":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ProfileCurve:
    device_type: str
    points: Mapping[int, float]
    comm_overhead: float = 0.0
    skipped: tuple[int, ...] = ()

    def __post_init__(self):
        points = {int(b): float(t) for b, t in sorted(self.points.items())}
        if any(t <= 0 for t in points.values()):
            raise ValueError("profiled step times must be positive")
        if self.comm_overhead < 0:
            raise ValueError("communication overhead must be non-negative")
        object.__setattr__(self, "points", points)

    def step_time(self, batch_size: int) -> float:
        try:
            return self.points[batch_size]
        except KeyError:
            raise InterpolationError(
                f"{self.device_type} was not profiled at batch size {batch_size}") from None

    def to_dict(self) -> dict:
        return {"device_type": self.device_type, "comm_overhead_s": self.comm_overhead,
                "points": [{"batch_size": b, "step_time_s": t} for b, t in self.points.items()]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileCurve":
        return cls(d["device_type"], {p["batch_size"]: p["step_time_s"] for p in d["points"]},
                   d.get("comm_overhead_s", 0.0))


def _timed_mean(model: DeviceModel, batch_size: int, num_devices: int, steps: int) -> float:
    times = [model.step_time(batch_size, num_devices, step=i) for i in range(steps)]
    return statistics.fmean(times[WARMUP_STEPS:])


def profile(workload: ModelSpec, device_model: DeviceModel, batch_sizes: Sequence[int],
            memory_capacity: int | None = None, steps: int = PROFILE_STEPS,
            execute: bool = True, data_seed: int = 0) -> ProfileCurve:
    """Time ``steps`` steps per batch size on the simulated device.

    The first four steps are warm-up and are left out of the mean. When
    ``execute`` is set each timed step also runs a real forward/backward pass
    of ``workload`` on synthetic data.
    """
    if steps < PROFILE_STEPS:
        raise ValueError(f"profiling needs at least {PROFILE_STEPS} steps")
    params = init_model(workload) if execute else None
    kstate = StatefulKernelState.initial(workload) if execute else None
    points, skipped = {}, []
    for b in sorted(set(batch_sizes)):
        if memory_capacity is not None and b > memory_capacity:
            log.warning("%s: batch size %d exceeds capacity %d, skipped",
                        device_model.device_type, b, memory_capacity)
            skipped.append(b)
            continue
        if execute:
            data = synth_dataset(data_seed, b, workload.input_width, workload.output_width,
                                 task_for(workload))
            batch = data.batch(np.arange(b))
            for _ in range(steps):
                forward_backward(params, batch, kstate)
        points[b] = _timed_mean(device_model, b, 1, steps)
    comm = _timed_mean(device_model, 1, 2, steps) - _timed_mean(device_model, 1, 1, steps)
    return ProfileCurve(device_model.device_type, points, max(comm, 0.0), tuple(skipped))


@dataclass(frozen=True)
class DevicePool:
    """device type -> (count, memory capacity in examples)."""

    entries: Mapping[str, tuple[int, int]]

    def __post_init__(self):
        entries = {t: (int(c), int(m)) for t, (c, m) in sorted(self.entries.items())}
        if any(c < 0 for c, _ in entries.values()):
            raise ValueError("device counts must be non-negative")
        if not any(c > 0 for c, _ in entries.values()):
            raise ValueError("the pool needs at least one device")
        object.__setattr__(self, "entries", entries)

    def count(self, device_type: str) -> int:
        return self.entries[device_type][0]

    def capacity(self, device_type: str) -> int:
        return self.entries[device_type][1]

    @property
    def types(self) -> list[str]:
        return list(self.entries)

    def to_dict(self) -> dict:
        return {t: {"count": c, "memory_capacity": m} for t, (c, m) in self.entries.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DevicePool":
        return cls({t: (e["count"], e["memory_capacity"]) for t, e in d.items()})


@dataclass(frozen=True)
class TypeAssignment:
    device_type: str
    num_devices: int
    batch_size: int
    virtual_nodes: int

    @property
    def micro_batch(self) -> int:
        return self.batch_size // self.virtual_nodes


@dataclass(frozen=True)
class HeteroAssignment:
    per_type: tuple[TypeAssignment, ...]
    predicted_step_time: float
    global_batch: int

    def __post_init__(self):
        total = sum(a.num_devices * a.batch_size for a in self.per_type)
        if total != self.global_batch:
            raise ValueError(f"per-device batches sum to {total}, not {self.global_batch}")
        for a in self.per_type:
            if a.num_devices < 1 or a.virtual_nodes < 1 or a.batch_size % a.virtual_nodes:
                raise ValueError(f"bad entry {a}")

    @property
    def total_devices(self) -> int:
        return sum(a.num_devices for a in self.per_type)

    @property
    def types(self) -> list[str]:
        return [a.device_type for a in self.per_type]

    @property
    def is_homogeneous(self) -> bool:
        return len(self.per_type) == 1

    def device_shares(self) -> list[tuple[str, int]]:
        """(device name, per-device batch) for every device, in type order."""
        return [(f"{a.device_type}:{k}", a.batch_size)
                for a in self.per_type for k in range(a.num_devices)]

    def to_dict(self) -> dict:
        return {
            "global_batch": self.global_batch,
            "predicted_step_time_s": self.predicted_step_time,
            "per_type": [{"device_type": a.device_type, "num_devices": a.num_devices,
                          "batch_size": a.batch_size, "virtual_nodes": a.virtual_nodes}
                         for a in self.per_type],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "HeteroAssignment":
        return cls(tuple(TypeAssignment(e["device_type"], e["num_devices"], e["batch_size"],
                                        e["virtual_nodes"]) for e in d["per_type"]),
                   d["predicted_step_time_s"], d["global_batch"])


def _comm(profiles: Mapping[str, ProfileCurve], used: Sequence[tuple[str, int]]) -> float:
    """One additive constant per job: the largest overhead among the used
    types, and nothing at all on a single device."""
    if sum(n for _, n in used) <= 1:
        return 0.0
    return max(profiles[t].comm_overhead for t, _ in used)


def predict_step_time(assignment: HeteroAssignment | Sequence[TypeAssignment],
                      profiles: Mapping[str, ProfileCurve]) -> float:
    per_type = assignment.per_type if isinstance(assignment, HeteroAssignment) else assignment
    used = [a for a in per_type if a.num_devices > 0]
    if not used:
        raise ValueError("assignment uses no devices")
    slowest = max(profiles[a.device_type].step_time(a.micro_batch) * a.virtual_nodes
                  for a in used)
    return slowest + _comm(profiles, [(a.device_type, a.num_devices) for a in used])


def _per_device_options(curve: ProfileCurve, capacity: int, v_cap: int) -> dict[int, tuple[float, int]]:
    """batch size -> (time, virtual nodes) of the fastest way to run it."""
    best: dict[int, tuple[float, int]] = {}
    for micro, t in curve.points.items():
        if micro > capacity:
            continue
        for v in virtual_node_counts(v_cap):
            b = micro * v
            cost = t * v
            if b not in best or (cost, v) < best[b]:
                best[b] = (cost, v)
    return best


@dataclass
class SolveResult:
    assignment: HeteroAssignment
    table: list[dict] = field(default_factory=list)


def _rank_key(time: float, parts: Sequence[TypeAssignment]):
    return (time, sum(a.num_devices for a in parts), tuple(a.device_type for a in parts),
            tuple((a.device_type, a.num_devices, a.batch_size, a.virtual_nodes) for a in parts))


def _infeasible(profiles, pool, global_batch, v_cap) -> InfeasibleError:
    limits = []
    for t in pool.types:
        if pool.count(t) == 0 or t not in profiles:
            continue
        micro = [m for m in profiles[t].points if m <= pool.capacity(t)]
        if micro:
            limits.append((t, pool.count(t), max(micro) * v_cap))
    most = sum(n * b for _, n, b in limits)
    if not limits:
        msg = "no device type has a profiled micro-batch within its memory capacity"
    elif most < global_batch:
        detail = ", ".join(f"{n} x {t} <= {b}" for t, n, b in limits)
        msg = (f"global batch {global_batch} exceeds the largest reachable total {most} "
               f"({detail}; at most {v_cap} virtual nodes per device)")
    else:
        msg = (f"no combination of per-device batch sizes sums to exactly {global_batch}; "
               f"per-device batches must be a profiled micro-batch times a power of two")
    return InfeasibleError(msg)


def solve(profiles: Mapping[str, ProfileCurve], pool: DevicePool, global_batch: int,
          v_cap: int = MAX_VIRTUAL_NODES, explain: bool = False) -> HeteroAssignment | SolveResult:
    """Exhaustive min-max search over (devices, batch, virtual nodes) per type.

    Ties go to fewer devices, then to type names in lexicographic order. With
    ``explain`` every feasible (n, b, v) combination is evaluated and returned
    as a table alongside the answer.
    """
    if global_batch < 1:
        raise ValueError("global batch must be positive")
    types = [t for t in pool.types if pool.count(t) > 0 and t in profiles]
    if explain:
        return _solve_explained(profiles, pool, types, global_batch, v_cap)

    options = {t: sorted(_per_device_options(profiles[t], pool.capacity(t), v_cap).items())
               for t in types}
    best: list = [None, None]  # key, parts

    def visit(i: int, remaining: int, parts: list[TypeAssignment], slowest: float):
        if best[0] is not None and slowest > best[0][0]:
            return
        if i == len(types):
            if remaining == 0 and parts:
                time = slowest + _comm(profiles, [(a.device_type, a.num_devices) for a in parts])
                key = _rank_key(time, parts)
                if best[0] is None or key < best[0]:
                    best[0], best[1] = key, list(parts)
            return
        t = types[i]
        visit(i + 1, remaining, parts, slowest)
        last = i == len(types) - 1
        for n in range(1, pool.count(t) + 1):
            for b, (cost, v) in options[t]:
                if n * b > remaining:
                    break
                if last and n * b != remaining:
                    continue
                parts.append(TypeAssignment(t, n, b, v))
                visit(i + 1, remaining - n * b, parts, max(slowest, cost))
                parts.pop()

    visit(0, global_batch, [], 0.0)
    if best[1] is None:
        raise _infeasible(profiles, pool, global_batch, v_cap)
    return HeteroAssignment(tuple(best[1]), best[0][0], global_batch)


def enumerate_candidates(profiles: Mapping[str, ProfileCurve], pool: DevicePool,
                         global_batch: int, v_cap: int = MAX_VIRTUAL_NODES):
    """Every feasible full assignment with its predicted step time."""
    types = [t for t in pool.types if pool.count(t) > 0 and t in profiles]
    per_type = []
    for t in types:
        opts: list[TypeAssignment | None] = [None]
        micros = [m for m in profiles[t].points if m <= pool.capacity(t)]
        for n in range(1, pool.count(t) + 1):
            for m in micros:
                for v in virtual_node_counts(v_cap):
                    opts.append(TypeAssignment(t, n, m * v, v))
        per_type.append(opts)
    for combo in itertools.product(*per_type):
        parts = [a for a in combo if a is not None]
        if parts and sum(a.num_devices * a.batch_size for a in parts) == global_batch:
            yield parts, predict_step_time(parts, profiles)


def _solve_explained(profiles, pool, types, global_batch, v_cap) -> SolveResult:
    table, best = [], None
    for parts, time in enumerate_candidates(profiles, pool, global_batch, v_cap):
        key = _rank_key(time, parts)
        table.append({"predicted_step_time_s": time,
                      "per_type": [{"device_type": a.device_type, "num_devices": a.num_devices,
                                    "batch_size": a.batch_size, "virtual_nodes": a.virtual_nodes}
                                   for a in parts]})
        if best is None or key < best[0]:
            best = (key, parts)
    if best is None:
        raise _infeasible(profiles, pool, global_batch, v_cap)
    return SolveResult(HeteroAssignment(tuple(best[1]), best[0][0], global_batch), table)


# -- uneven sharding ----------------------------------------------------------

@dataclass(frozen=True)
class Shard:
    device: str
    start: int
    length: int


@dataclass(frozen=True, eq=False)
class ShardPlan:
    order: np.ndarray  # this epoch's permutation of example ids
    shards: tuple[Shard, ...]

    def ids(self, device: str) -> np.ndarray:
        for s in self.shards:
            if s.device == device:
                return self.order[s.start:s.start + s.length]
        raise KeyError(device)

    @property
    def lengths(self) -> list[int]:
        return [s.length for s in self.shards]


def shard_lengths(dataset_size: int, shares: Sequence[int]) -> list[int]:
    """Split ``dataset_size`` in proportion to ``shares``; leftover examples go
    one at a time to the largest shares first, cycling."""
    total = sum(shares)
    if total <= 0 or any(s < 0 for s in shares):
        raise ValueError("shares must be non-negative with a positive total")
    lengths = [dataset_size * s // total for s in shares]
    left = dataset_size - sum(lengths)
    by_size = sorted(range(len(shares)), key=lambda i: (-shares[i], i))
    for k in range(left):
        lengths[by_size[k % len(by_size)]] += 1
    return lengths


def make_shard_plan(dataset_size: int, assignment: HeteroAssignment | Sequence[int],
                    epoch_seed: int) -> ShardPlan:
    """Contiguous shards of a seeded permutation, sized like the per-device
    batches, so every example is read exactly once per epoch."""
    if isinstance(assignment, HeteroAssignment):
        named = assignment.device_shares()
    else:
        named = [(f"dev{i}", int(b)) for i, b in enumerate(assignment)]
    lengths = shard_lengths(dataset_size, [b for _, b in named])
    order = _philox(epoch_seed, 5).permutation(dataset_size)
    shards, pos = [], 0
    for (name, _), n in zip(named, lengths):
        shards.append(Shard(name, pos, n))
        pos += n
    return ShardPlan(order, tuple(shards))


def linear_profiles(models: Sequence[DeviceModel], max_b: int) -> dict[str, ProfileCurve]:
    """Profiles read straight off cost models, without running the workload."""
    sizes = candidate_batch_sizes(max_b)
    out = {}
    for m in models:
        pts = {b: m.step_time(b) for b in sizes}
        comm = m.step_time(1, 2) - m.step_time(1, 1)
        out[m.device_type] = ProfileCurve(m.device_type, pts, max(comm, 0.0))
    return out


def throughput(assignment: HeteroAssignment) -> float:
    """Training examples per second."""
    return assignment.global_batch / assignment.predicted_step_time if \
        assignment.predicted_step_time > 0 else math.inf
