"""Jobs, workloads and traces for the cluster simulator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from ..core import ModelSpec, _philox
from ..hetero import DeviceModel, DevicePool, HeteroAssignment, ProfileCurve, linear_profiles, solve


@dataclass(frozen=True)
class Workload:
    """A training job's shape and its cost on every device type.

    The global batch and virtual-node count are fixed for the life of the
    job; the allocation only changes how many waves each device runs.
    """

    name: str
    spec: ModelSpec
    global_batch: int
    virtual_nodes: int
    device_models: Mapping[str, DeviceModel]

    def __post_init__(self):
        if self.global_batch % self.virtual_nodes:
            raise ValueError(f"{self.name}: {self.virtual_nodes} virtual nodes do not divide "
                             f"batch {self.global_batch}")
        object.__setattr__(self, "device_models", dict(sorted(self.device_models.items())))

    @property
    def micro_batch(self) -> int:
        return self.global_batch // self.virtual_nodes

    def step_time(self, counts: Mapping[str, int], pool: DevicePool | None = None) -> float:
        """Seconds per step on ``counts`` devices of each type.

        One type: ``ceil(V / n)`` waves of the fixed micro-batch plus the
        all-reduce. Several types: whatever the heterogeneous solver predicts.
        """
        used = {t: n for t, n in counts.items() if n > 0}
        if not used:
            return math.inf
        if len(used) == 1:
            (t, n), = used.items()
            m = self.device_models[t]
            waves = -(-self.virtual_nodes // n)
            one = m.fixed_overhead_s + m.per_example_s * self.micro_batch
            return waves * one + (m.allreduce_s if n > 1 else 0.0)
        return self.solve(used, pool).predicted_step_time

    def profiles(self) -> dict[str, ProfileCurve]:
        return linear_profiles(list(self.device_models.values()), self.global_batch)

    def solve(self, counts: Mapping[str, int], pool: DevicePool | None = None) -> HeteroAssignment:
        caps = {t: (pool.capacity(t) if pool is not None and t in pool.entries else self.global_batch)
                for t in counts}
        sub = DevicePool({t: (n, caps[t]) for t, n in counts.items() if n > 0})
        return solve(self.profiles(), sub, self.global_batch)

    def to_dict(self) -> dict:
        return {"name": self.name, "widths": list(self.spec.widths),
                "global_batch": self.global_batch, "virtual_nodes": self.virtual_nodes,
                "device_models": [m.to_dict() for m in self.device_models.values()]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Workload":
        models = [DeviceModel.from_dict(m) for m in d["device_models"]]
        return cls(d["name"], ModelSpec(tuple(d.get("widths", (4, 16, 4)))), d["global_batch"],
                   d["virtual_nodes"], {m.device_type: m for m in models})


def _models(v100: DeviceModel, p100: float, k80: float) -> dict[str, DeviceModel]:
    # compute slows down on older parts; the all-reduce is a network cost
    def slower(f, name):
        return DeviceModel(name, v100.fixed_overhead_s * f, v100.per_example_s * f, v100.allreduce_s)
    return {"V100": v100, "P100": slower(p100, "P100"), "K80": slower(k80, "K80")}


# Shapes loosely follow the usual image / language training mix; speeds are
# relative to a V100 and differ per model, as they do on real hardware.
CATALOG: dict[str, Workload] = {w.name: w for w in [
    Workload("resnet-like", ModelSpec((32, 64, 10)), 256, 16,
             _models(DeviceModel("V100", 0.02, 1.0e-3, 0.04), 1.6, 4.0)),
    Workload("bert-like", ModelSpec((32, 128, 2)), 128, 16,
             _models(DeviceModel("V100", 0.03, 2.4e-3, 0.06), 1.8, 5.0)),
    Workload("transformer-like", ModelSpec((16, 64, 16)), 256, 16,
             _models(DeviceModel("V100", 0.02, 1.2e-3, 0.05), 1.7, 4.5)),
    Workload("lstm-like", ModelSpec((16, 32, 16)), 64, 8,
             _models(DeviceModel("V100", 0.01, 2.0e-3, 0.02), 1.3, 2.5)),
    Workload("cnn-small", ModelSpec((8, 32, 10)), 64, 4,
             _models(DeviceModel("V100", 0.005, 1.0e-3, 0.01), 1.2, 2.0)),
]}


@dataclass
class Job:
    job_id: str
    priority: float
    demand: int
    workload: Workload
    steps: int
    arrival_time: float = 0.0
    attained_service: float = 0.0

    def __post_init__(self):
        if not self.priority > 0:
            raise ValueError(f"job {self.job_id}: priority must be positive")
        if self.demand < 1:
            raise ValueError(f"job {self.job_id}: demand must be at least 1")
        if self.steps < 1:
            raise ValueError(f"job {self.job_id}: needs at least one step")
        if self.arrival_time < 0:
            raise ValueError(f"job {self.job_id}: negative arrival time")

    def to_dict(self) -> dict:
        w = self.workload
        return {"job_id": self.job_id, "arrival_s": self.arrival_time, "priority": self.priority,
                "demand": self.demand, "steps": self.steps,
                "workload": w.name if CATALOG.get(w.name) == w else w.to_dict()}


def load_trace(doc: Sequence[Mapping]) -> list[Job]:
    jobs = []
    for row in doc:
        w = row["workload"]
        if isinstance(w, str):
            if w not in CATALOG:
                raise ValueError(f"unknown workload {w!r}")
            w = CATALOG[w]
        else:
            w = Workload.from_dict(w)
        jobs.append(Job(str(row["job_id"]), row["priority"], int(row["demand"]), w,
                        int(row["steps"]), float(row["arrival_s"])))
    ids = [j.job_id for j in jobs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate job ids in trace")
    if any(a.arrival_time > b.arrival_time for a, b in zip(jobs, jobs[1:])):
        raise ValueError("trace arrival times must be nondecreasing")
    return jobs


def dump_trace(jobs: Sequence[Job]) -> str:
    return json.dumps([j.to_dict() for j in jobs], indent=2) + "\n"


def poisson_trace(seed: int, num_jobs: int = 20, mean_interarrival_s: float = 300.0,
                  priorities: Sequence[float] = (1, 5, 10), demands: Sequence[int] = (1, 2, 4, 8),
                  minutes: tuple[float, float] = (20.0, 90.0),
                  workloads: Sequence[str] | None = None) -> list[Job]:
    """Poisson arrivals with random priority, demand, workload and length.

    ``minutes`` bounds how long a job would run alone at its full demand on
    V100s; the step count is derived from that.
    """
    rng = _philox(seed, 7)
    names = list(workloads or CATALOG)
    t = 0.0
    jobs = []
    for i in range(num_jobs):
        if i:
            t += float(rng.exponential(mean_interarrival_s))
        w = CATALOG[names[int(rng.integers(len(names)))]]
        demand = min(int(demands[int(rng.integers(len(demands)))]), w.virtual_nodes)
        prio = priorities[int(rng.integers(len(priorities)))]
        seconds = 60.0 * float(rng.uniform(*minutes))
        steps = max(1, int(seconds / w.step_time({"V100": demand})))
        jobs.append(Job(f"job{i:02d}", prio, demand, w, steps, round(t, 3)))
    return jobs
