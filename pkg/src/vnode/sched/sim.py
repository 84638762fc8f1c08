"""Discrete-event cluster simulator.

Jobs make progress at the step rate their current allocation gives them under
the device cost model. Resizes are free by default: the job keeps its global
batch and virtual nodes and simply runs a different number of waves per device.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
import statistics
from dataclasses import dataclass, field
from typing import Sequence

from ..elastic import plan_resize
from ..hetero import DevicePool
from ..virtual import DeviceSpec, make_uniform_mapping
from .jobs import Job
from .policies import SolveCache, het_round_allocate, static_schedule, wfs_schedule

POLICIES = ("static", "wfs", "het-rounds")
KIND_RANK = {"completion": 0, "arrival": 1, "round_boundary": 2, "resize": 3}
DEFAULT_ROUND_S = 360.0
_EPS = 1e-9


@dataclass(frozen=True)
class ClusterEvent:
    time: float
    kind: str
    job_id: str = ""
    payload: object = None

    def __post_init__(self):
        if self.kind not in KIND_RANK:
            raise ValueError(f"unknown event kind {self.kind!r}")

    def sort_key(self):
        return (self.time, KIND_RANK[self.kind], self.job_id)


@dataclass(frozen=True)
class Allocation:
    devices: dict[str, tuple[tuple[str, str], ...]]  # job -> ((device_id, type), ...)
    timestamp: float

    def validate(self, cluster: DevicePool, demand: dict[str, int]) -> None:
        seen: set[str] = set()
        for job, devs in self.devices.items():
            ids = {d for d, _ in devs}
            if ids & seen:
                raise AssertionError(f"device shared at t={self.timestamp}")
            seen |= ids
            if len(devs) > demand[job]:
                raise AssertionError(f"{job} holds more than its demand")
        if len(seen) > sum(cluster.count(t) for t in cluster.types):
            raise AssertionError("allocation exceeds the cluster")


@dataclass
class JobRecord:
    job_id: str
    priority: float
    demand: int
    arrival: float
    steps: int
    start: float | None = None
    completion: float | None = None
    steps_done: float = 0.0

    @property
    def jct(self) -> float:
        return self.completion - self.arrival

    @property
    def queueing_delay(self) -> float:
        return self.start - self.arrival


@dataclass
class TraceMetrics:
    policy: str
    jobs: list[JobRecord]
    makespan: float
    utilization: list[tuple[float, float]]  # (time, busy fraction from then on)
    events: list[dict] = field(default_factory=list)

    @property
    def mean_utilization(self) -> float:
        """Time-weighted busy fraction over the makespan."""
        if not self.utilization or self.makespan <= 0:
            return 0.0
        end = self.utilization[0][0] + self.makespan
        area = 0.0
        for (t0, u), (t1, _) in zip(self.utilization, self.utilization[1:] + [(end, 0.0)]):
            area += u * (min(t1, end) - t0)
        return area / self.makespan

    def _median(self, attr: str) -> float:
        vals = [getattr(j, attr) for j in self.jobs]
        return statistics.median(vals) if vals else 0.0

    @property
    def median_jct(self) -> float:
        return self._median("jct")

    @property
    def median_queueing_delay(self) -> float:
        return self._median("queueing_delay")

    def job(self, job_id: str) -> JobRecord:
        return next(j for j in self.jobs if j.job_id == job_id)

    @property
    def mixed_allocations(self) -> list[dict]:
        return [e for e in self.events if e["kind"] == "allocate" and e.get("mixed")]

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "num_jobs": len(self.jobs),
            "makespan_s": self.makespan,
            "mean_utilization": self.mean_utilization,
            "median_jct_s": self.median_jct,
            "median_queueing_delay_s": self.median_queueing_delay,
            "mixed_allocations": len(self.mixed_allocations),
            "jobs": [{"job_id": j.job_id, "priority": j.priority, "jct_s": j.jct,
                      "queueing_delay_s": j.queueing_delay, "steps": j.steps_done}
                     for j in self.jobs],
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2) + "\n"

    def utilization_jsonl(self) -> str:
        return "".join(json.dumps({"time_s": t, "utilization": u}) + "\n"
                       for t, u in self.utilization)

    def jobs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["job_id", "priority", "demand", "arrival_s", "start_s", "completion_s",
                    "jct_s", "queueing_delay_s", "steps"])
        for j in self.jobs:
            w.writerow([j.job_id, j.priority, j.demand, repr(j.arrival), repr(j.start),
                        repr(j.completion), repr(j.jct), repr(j.queueing_delay), j.steps])
        return buf.getvalue()


def cluster_devices(cluster: DevicePool) -> list[tuple[str, str]]:
    return [(f"{t}-{i:02d}", t) for t in cluster.types for i in range(cluster.count(t))]


class Simulator:
    def __init__(self, jobs: Sequence[Job], policy: str, cluster: DevicePool,
                 round_seconds: float = DEFAULT_ROUND_S, resize_penalty_s: float = 0.0,
                 validate: bool = False):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}; choose from {POLICIES}")
        if round_seconds <= 0:
            raise ValueError("round_seconds must be positive")
        self.policy = policy
        self.cluster = cluster
        self.round_s = float(round_seconds)
        self.penalty = float(resize_penalty_s)
        self.validate = validate
        self.jobs = {j.job_id: j for j in jobs}
        if len(self.jobs) != len(jobs):
            raise ValueError("duplicate job ids in trace")
        for j in jobs:
            for t in cluster.types:
                if cluster.count(t) and t not in j.workload.device_models:
                    raise ValueError(f"job {j.job_id} has no cost model for {t}")
        self.devices = cluster_devices(cluster)
        self.dtype = dict(self.devices)
        self.total = len(self.devices)
        self.records = {j.job_id: JobRecord(j.job_id, j.priority, j.demand, j.arrival_time, j.steps)
                        for j in jobs}
        self.held: dict[str, list[str]] = {}
        self.step_time: dict[str, float] = {}
        self.version: dict[str, int] = {}
        self.queue: list[Job] = []
        self.now = 0.0
        self.last = 0.0
        self.heap: list = []
        self.seq = 0
        self.log: list[dict] = []
        self.util: list[tuple[float, float]] = []
        self.cache = SolveCache(cluster)

    # -- event plumbing ------------------------------------------------------
    def push(self, ev: ClusterEvent) -> None:
        heapq.heappush(self.heap, (ev.sort_key(), self.seq, ev))
        self.seq += 1

    def advance(self, to: float) -> None:
        dt = to - self.last
        if dt > 0:
            for k in sorted(self.held):
                rec = self.records[k]
                rec.steps_done = min(rec.steps, rec.steps_done + dt / self.step_time[k])
                self.jobs[k].attained_service += dt * len(self.held[k])
        self.last = self.now = to

    def free_ids(self) -> list[str]:
        busy = {d for devs in self.held.values() for d in devs}
        return [d for d, _ in self.devices if d not in busy]

    def counts(self, ids: Sequence[str]) -> dict[str, int]:
        out: dict[str, int] = {}
        for d in ids:
            out[self.dtype[d]] = out.get(self.dtype[d], 0) + 1
        return out

    def set_devices(self, job_id: str, ids: list[str], step_time: float | None = None) -> None:
        old = self.held.get(job_id, [])
        if sorted(old) == sorted(ids):
            return
        rec = self.records[job_id]
        job = self.jobs[job_id]
        if not ids:
            self.held.pop(job_id, None)
            self.step_time.pop(job_id, None)
        else:
            if rec.start is None:
                rec.start = self.now
            elif old and self.policy != "het-rounds":
                # what a resize would move; free in simulated time
                mapping = make_uniform_mapping(job.workload.global_batch,
                                               job.workload.virtual_nodes,
                                               [DeviceSpec(d, self.dtype[d]) for d in sorted(old)])
                plan = plan_resize(mapping, [DeviceSpec(d, self.dtype[d]) for d in ids])
                self.log.append({"kind": "resize", "time": self.now, "job_id": job_id,
                                 "from": len(old), "to": len(ids), "moves": len(plan.moves)})
            self.held[job_id] = sorted(ids)
            st = step_time if step_time is not None else job.workload.step_time(
                self.counts(ids), self.cluster)
            if old and self.penalty:
                rec.steps_done = max(0.0, rec.steps_done - self.penalty / st)
            self.step_time[job_id] = st
        self.version[job_id] = self.version.get(job_id, 0) + 1
        if ids:
            left = (rec.steps - rec.steps_done) * self.step_time[job_id]
            self.push(ClusterEvent(self.now + left, "completion", job_id, self.version[job_id]))

    def resize_to(self, job_id: str, n: int) -> None:
        """Keep the lowest-numbered held devices; grow from the lowest free."""
        held = self.held.get(job_id, [])
        if n <= len(held):
            self.set_devices(job_id, held[:n])
        else:
            self.set_devices(job_id, held + self.free_ids()[: n - len(held)])

    def record_utilization(self) -> None:
        busy = sum(len(v) for v in self.held.values()) / self.total
        if self.util and self.util[-1][0] == self.now:
            self.util[-1] = (self.now, busy)
        else:
            self.util.append((self.now, busy))

    # -- policies -----------------------------------------------------------
    def reschedule(self) -> None:
        if self.policy == "static":
            idle = len(self.free_ids())
            for job_id, n in static_schedule(self.queue, idle, self.total):
                self.queue = [j for j in self.queue if j.job_id != job_id]
                self.resize_to(job_id, n)
                self.log.append({"kind": "start", "time": self.now, "job_id": job_id, "devices": n})
        elif self.policy == "wfs":
            running = [self.jobs[k] for k in sorted(self.held)]
            queue = sorted(self.queue, key=lambda j: (-j.priority, j.arrival_time, j.job_id))
            dec = wfs_schedule(running, queue, {k: len(v) for k, v in self.held.items()},
                               self.total)
            for entry in dec.log:
                self.log.append({"kind": "admit", "time": self.now, **entry})
            admitted = {k for k in dec.admitted if dec.counts[k] > 0}
            self.queue = [j for j in self.queue if j.job_id not in admitted]
            # squeezed to nothing: back to the queue, progress kept
            for k in sorted(dec.counts):
                if dec.counts[k] == 0 and k in self.held:
                    self.set_devices(k, [])
                    self.queue.append(self.jobs[k])
                    self.log.append({"kind": "suspend", "time": self.now, "job_id": k})
            # shrink first so growing jobs find the freed devices
            for k in sorted(dec.counts, key=lambda k: (dec.counts[k] - len(self.held.get(k, [])), k)):
                self.resize_to(k, dec.counts[k])

    def het_round(self, index: int) -> None:
        active = [self.jobs[k] for k in sorted(self.jobs)
                  if self.records[k].arrival <= self.now and self.records[k].completion is None]
        for k in list(self.held):
            self.set_devices(k, [])
        grants = het_round_allocate(active, self.cluster, self.cache)
        free = {t: [d for d, dt in self.devices if dt == t] for t in self.cluster.types}
        for g in grants:
            ids = []
            for t, n in sorted(g.counts.items()):
                ids += free[t][:n]
                free[t] = free[t][n:]
            self.set_devices(g.job_id, ids, g.step_time)
            self.log.append({"kind": "allocate", "time": self.now, "round": index,
                             "job_id": g.job_id, "counts": dict(sorted(g.counts.items())),
                             "mixed": g.is_mixed, "step_time_s": g.step_time,
                             "homogeneous_step_time_s": g.homogeneous_step_time})

    # -- main loop ----------------------------------------------------------
    def run(self) -> TraceMetrics:
        for j in sorted(self.jobs.values(), key=lambda j: (j.arrival_time, j.job_id)):
            self.push(ClusterEvent(j.arrival_time, "arrival", j.job_id))
        if self.policy == "het-rounds" and self.jobs:
            first = min(j.arrival_time for j in self.jobs.values())
            self.push(ClusterEvent(math.ceil(first / self.round_s) * self.round_s,
                                   "round_boundary", "", 0))
        start = min((j.arrival_time for j in self.jobs.values()), default=0.0)
        self.now = self.last = start
        pending = len(self.jobs)
        while self.heap and pending:
            _, _, ev = heapq.heappop(self.heap)
            self.advance(ev.time)
            if ev.kind == "arrival":
                self.queue.append(self.jobs[ev.job_id])
                self.log.append({"kind": "arrival", "time": self.now, "job_id": ev.job_id})
                if self.policy != "het-rounds":
                    self.reschedule()
            elif ev.kind == "completion":
                if self.version.get(ev.job_id) != ev.payload or ev.job_id not in self.held:
                    continue
                rec = self.records[ev.job_id]
                rec.steps_done = float(rec.steps)
                rec.completion = self.now
                pending -= 1
                self.set_devices(ev.job_id, [])
                self.log.append({"kind": "completion", "time": self.now, "job_id": ev.job_id})
                if self.policy != "het-rounds":
                    self.reschedule()
            elif ev.kind == "round_boundary":
                self.queue = []
                self.het_round(ev.payload)
                nxt = self.now + self.round_s
                if not any(r.completion is None and r.arrival <= self.now
                           for r in self.records.values()):
                    later = [r.arrival for r in self.records.values() if r.arrival > self.now]
                    if later:
                        nxt = math.ceil(min(later) / self.round_s) * self.round_s
                self.push(ClusterEvent(nxt, "round_boundary", "", ev.payload + 1))
            self.record_utilization()
            if self.validate:
                self.check_allocation()
        end = max((r.completion for r in self.records.values()), default=start)
        recs = sorted(self.records.values(), key=lambda r: (r.arrival, r.job_id))
        util = [(t, u) for t, u in self.util if t <= end] or [(start, 0.0)]
        return TraceMetrics(self.policy, recs, end - start, util, self.log)

    def check_allocation(self) -> None:
        alloc = Allocation({k: tuple((d, self.dtype[d]) for d in v) for k, v in self.held.items()},
                           self.now)
        alloc.validate(self.cluster, {k: j.demand for k, j in self.jobs.items()})
        if self.policy == "wfs" and not self.queue:
            hungry = [k for k, v in self.held.items() if len(v) < self.jobs[k].demand]
            if hungry and self.free_ids():
                raise AssertionError(f"idle devices while {hungry} want more at t={self.now}")


def run_simulation(trace: Sequence[Job], policy: str, cluster: DevicePool, seed: int = 0,
                   round_seconds: float = DEFAULT_ROUND_S, resize_penalty_s: float = 0.0,
                   validate: bool = False) -> TraceMetrics:
    """Simulate ``trace`` under ``policy``.

    The simulation itself draws no random numbers; ``seed`` is accepted so
    callers that generate traces can pass one value through.
    """
    del seed
    jobs = [Job(j.job_id, j.priority, j.demand, j.workload, j.steps, j.arrival_time)
            for j in trace]
    if any(a.arrival_time > b.arrival_time for a, b in zip(jobs, jobs[1:])):
        raise ValueError("trace arrival times must be nondecreasing")
    return Simulator(jobs, policy, cluster, round_seconds, resize_penalty_s, validate).run()
