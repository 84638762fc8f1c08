"""Allocation policies: static priority, elastic weighted fair sharing, and
least-attained-service rounds with heterogeneous top-ups."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from ..hetero import DevicePool, HeteroAssignment, InfeasibleError
from .jobs import Job


@dataclass(frozen=True)
class ShareRequest:
    job_id: str
    priority: float
    demand: int


def compute_fair_shares(jobs: Sequence[ShareRequest | tuple], total_devices: int) -> dict[str, int]:
    """Priority-proportional integer shares, capped at demand.

    Ideal shares are water-filled with exact rationals, floored, and the
    leftover devices go by largest remainder. Remainder ties go to the higher
    priority, then the smaller demand, then the smaller job id.
    """
    if total_devices < 1:
        raise ValueError("total_devices must be at least 1")
    reqs = [j if isinstance(j, ShareRequest) else ShareRequest(*j) for j in jobs]
    if not reqs:
        return {}
    prio = {r.job_id: Fraction(r.priority) for r in reqs}
    demand = {r.job_id: r.demand for r in reqs}
    ideal: dict[str, Fraction] = {}
    active = [r.job_id for r in reqs]
    left = Fraction(total_devices)
    while active:
        weight = sum(prio[j] for j in active)
        capped = [j for j in active if left * prio[j] / weight >= demand[j]]
        if not capped:
            for j in active:
                ideal[j] = left * prio[j] / weight
            break
        for j in capped:
            ideal[j] = Fraction(demand[j])
            left -= demand[j]
        active = [j for j in active if j not in capped]

    shares = {j: math.floor(s) for j, s in ideal.items()}
    spare = min(total_devices, sum(demand.values())) - sum(shares.values())
    order = sorted(ideal, key=lambda j: (-(ideal[j] - shares[j]), -prio[j], demand[j], j))
    for j in order:
        if spare <= 0:
            break
        if shares[j] < demand[j] and ideal[j] > shares[j]:
            shares[j] += 1
            spare -= 1
    idle = total_devices - sum(shares.values())
    for r in sorted(reqs, key=lambda r: (-prio[r.job_id], r.job_id)):
        if idle <= 0:
            break
        if shares[r.job_id] == 0:
            shares[r.job_id] = 1
            idle -= 1
    return {r.job_id: shares[r.job_id] for r in reqs}


@dataclass
class WfsDecision:
    counts: dict[str, int]
    admitted: list[str] = field(default_factory=list)
    # one record per admission: who shrank, and from/to how many devices
    log: list[dict] = field(default_factory=list)


def wfs_schedule(running: Sequence[Job], queue: Sequence[Job], current: Mapping[str, int],
                 total_devices: int) -> WfsDecision:
    """Algorithm 1: admit queued jobs while no higher-priority job loses out.

    ``running`` jobs hold ``current`` device counts; ``queue`` is in arrival
    order. Admission stops at the first rejected job. Idle devices are handed
    out at the end, to jobs that were shrunk first and then by how far each
    job sits below its fair share.
    """
    jobs = {j.job_id: j for j in running}
    counts = {j.job_id: int(current.get(j.job_id, 0)) for j in running}
    before = dict(counts)
    dec = WfsDecision(counts)
    for head in queue:
        reqs = [ShareRequest(j.job_id, j.priority, j.demand) for j in jobs.values()]
        reqs.append(ShareRequest(head.job_id, head.priority, head.demand))
        shares = compute_fair_shares(reqs, total_devices)
        if shares[head.job_id] == 0:
            break
        if any(shares[k] < counts[k] for k, j in jobs.items() if j.priority > head.priority):
            break
        shrunk = []
        for k in sorted(counts):
            new = min(shares[k], counts[k])
            if new < counts[k]:
                shrunk.append({"job_id": k, "priority": jobs[k].priority,
                               "from": counts[k], "to": new})
                counts[k] = new
        jobs[head.job_id] = head
        counts[head.job_id] = shares[head.job_id]
        before[head.job_id] = 0
        dec.admitted.append(head.job_id)
        dec.log.append({"admitted": head.job_id, "priority": head.priority, "shrunk": shrunk})

    _expand(jobs, counts, before, total_devices)
    return dec


def _expand(jobs: Mapping[str, Job], counts: dict[str, int], before: Mapping[str, int],
            total: int) -> None:
    idle = total - sum(counts.values())
    for k in sorted(jobs, key=lambda k: (-jobs[k].priority, k)):
        give = min(idle, before[k] - counts[k])
        if give > 0:
            counts[k] += give
            idle -= give
    if idle <= 0:
        return
    shares = compute_fair_shares([ShareRequest(k, j.priority, j.demand) for k, j in jobs.items()],
                                 total)
    while idle > 0:
        hungry = [k for k in jobs if counts[k] < jobs[k].demand]
        if not hungry:
            break
        k = min(hungry, key=lambda k: (counts[k] - shares[k], -jobs[k].priority, k))
        counts[k] += 1
        idle -= 1


def static_schedule(queue: Sequence[Job], idle: int, total_devices: int) -> list[tuple[str, int]]:
    """Strict priority, no preemption and no backfilling.

    The queue is ordered by priority (highest first), then arrival; the head
    starts once its full demand is free and nothing behind it may jump ahead.
    """
    out = []
    for job in sorted(queue, key=lambda j: (-j.priority, j.arrival_time, j.job_id)):
        need = min(job.demand, total_devices)
        if need > idle:
            break
        out.append((job.job_id, need))
        idle -= need
    return out


# -- heterogeneity-aware rounds -------------------------------------------------

@dataclass(frozen=True)
class RoundGrant:
    job_id: str
    counts: Mapping[str, int]
    step_time: float
    homogeneous_step_time: float  # best single-type alternative on the same devices

    @property
    def is_mixed(self) -> bool:
        return sum(1 for n in self.counts.values() if n > 0) > 1


class SolveCache:
    """Memoised solver calls; rounds ask the same questions over and over."""

    def __init__(self, cluster: DevicePool):
        self.cluster = cluster
        self._memo: dict = {}

    def best(self, job: Job, counts: Mapping[str, int]) -> HeteroAssignment | None:
        key = (id(job.workload), tuple(sorted((t, n) for t, n in counts.items() if n > 0)))
        if key not in self._memo:
            try:
                self._memo[key] = job.workload.solve(dict(key[1]), self.cluster) if key[1] else None
            except InfeasibleError:
                self._memo[key] = None
        return self._memo[key]

    def homogeneous(self, job: Job, counts: Mapping[str, int]) -> tuple[float, dict[str, int]]:
        best = (math.inf, {})
        for t, n in sorted(counts.items()):
            if n <= 0:
                continue
            a = self.best(job, {t: n})
            if a is not None and a.predicted_step_time < best[0]:
                best = (a.predicted_step_time, {t: a.total_devices})
        return best


def het_round_allocate(jobs: Sequence[Job], cluster: DevicePool, cache: SolveCache,
                       mixed: bool = True) -> list[RoundGrant]:
    """One round: LAS order, homogeneous greedy grants, then top-ups.

    Jobs are ranked by attained service divided by priority. Each takes, in
    turn, the device type on which ``min(demand, free)`` devices run it
    fastest. Once everyone has been served, any free devices of a type a job
    does not already hold are offered to it, and kept only if the solver
    predicts a strictly shorter step than the best single-type use of the
    same devices.
    """
    free = {t: cluster.count(t) for t in cluster.types}
    grants: dict[str, RoundGrant] = {}
    ranked = sorted(jobs, key=lambda j: (j.attained_service / j.priority, j.arrival_time, j.job_id))
    for job in ranked:
        options = []
        for t in cluster.types:
            n = min(job.demand, free[t])
            if n <= 0:
                continue
            a = cache.best(job, {t: n})
            if a is not None:
                options.append((a.predicted_step_time, t, a.total_devices))
        if not options:
            continue
        time, t, n = min(options)
        free[t] -= n
        grants[job.job_id] = RoundGrant(job.job_id, {t: n}, time, time)

    if mixed:
        for job in ranked:
            g = grants.get(job.job_id)
            if g is None or sum(free.values()) == 0:
                continue
            held = sum(g.counts.values())
            room = job.demand - held
            if room <= 0:
                continue
            offer = dict(g.counts)
            for t in cluster.types:
                if t not in g.counts and free[t] > 0 and room > 0:
                    extra = min(free[t], room)
                    offer[t] = extra
                    room -= extra
            if len(offer) == len(g.counts):
                continue
            a = cache.best(job, offer)
            if a is None or a.is_homogeneous:
                continue
            used = {p.device_type: p.num_devices for p in a.per_type}
            alone, _ = cache.homogeneous(job, used)
            if a.predicted_step_time < g.step_time and a.predicted_step_time < alone:
                for t, n in used.items():
                    free[t] -= n - g.counts.get(t, 0)
                grants[job.job_id] = RoundGrant(job.job_id, used, a.predicted_step_time,
                                                min(alone, g.step_time))
    return [grants[j.job_id] for j in ranked if j.job_id in grants]
