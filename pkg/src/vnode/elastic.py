"""Resizing a running job by moving virtual nodes between devices.

The number of virtual nodes and their sizes never change, so the global batch
and the gradient of every step stay the same. What does change hands is state:
new devices need the parameters and a running-statistics tracker to carry on
from, and devices that leave hand their tracker to a survivor.
"""

from __future__ import annotations

import json
import pickle
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .core import ModelSpec, ParamVector, StatefulKernelState, init_model, synth_dataset, task_for
from .virtual import (CapacityError, DeviceSpec, Replica, StepMetrics, VirtualNodeMapping, World,
                      make_uniform_mapping, round_robin, train_step)


class MigrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ResizeRequest:
    job_id: str
    new_devices: tuple[DeviceSpec, ...]
    effective_step: int

    def __post_init__(self):
        object.__setattr__(self, "new_devices", tuple(self.new_devices))
        if not self.new_devices:
            raise ValueError("a resize needs at least one device")
        if self.effective_step < 0:
            raise ValueError("effective step must be non-negative")


@dataclass(frozen=True, eq=False)
class MigrationPlan:
    moves: tuple[tuple[int, str, str], ...]  # (node, from, to)
    state_sources: Mapping[str, tuple[str, ...]]  # recipient -> devices it gathers from
    old_mapping: VirtualNodeMapping
    new_mapping: VirtualNodeMapping
    new_devices: tuple[DeviceSpec, ...]

    @property
    def recipients(self) -> list[str]:
        """Devices that did not hold the model before."""
        return [d for d in self.new_mapping.devices if d not in self.old_mapping.assignments]

    @property
    def is_noop(self) -> bool:
        return not self.moves and set(self.new_mapping.devices) == set(self.old_mapping.devices)


def plan_resize(mapping: VirtualNodeMapping, new_devices: Sequence[DeviceSpec]) -> MigrationPlan:
    """Deal the same virtual nodes round-robin over the new devices.

    Node ids go in ascending order over device ids in ascending order. Keeping
    the device set unchanged keeps the mapping unchanged. No attempt is made to
    minimise the number of moves.
    """
    if not new_devices:
        raise ValueError("a resize needs at least one device")
    devices = sorted(new_devices, key=lambda d: d.device_id)
    ids = [d.device_id for d in devices]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate device ids")
    if len(ids) > mapping.num_nodes:
        raise ValueError(f"{mapping.num_nodes} virtual nodes cannot cover {len(ids)} devices")
    for node, size in mapping.sizes.items():
        for d in devices:
            if size > d.memory_capacity:
                raise CapacityError(
                    f"virtual node {node} ({size} examples) does not fit device "
                    f"{d.device_id!r} (capacity {d.memory_capacity})",
                    device_id=d.device_id, node_id=node)

    if set(ids) == set(mapping.devices):
        new_mapping = mapping
    else:
        new_mapping = VirtualNodeMapping(round_robin(mapping.num_nodes, ids), mapping.sizes)

    moves = []
    for node in range(mapping.num_nodes):
        src, dst = mapping.device_of(node), new_mapping.device_of(node)
        if src != dst:
            moves.append((node, src, dst))

    sources: dict[str, list[str]] = {}
    for dev in ids:
        if dev in mapping.assignments:
            sources[dev] = [dev]
        else:
            first = new_mapping.assignments[dev][0]
            sources[dev] = [mapping.device_of(first)]
    # a departing device hands its tracker to whoever takes its first node
    for dev in mapping.devices:
        if dev not in new_mapping.assignments:
            heir = new_mapping.device_of(mapping.assignments[dev][0])
            if heir in mapping.assignments:
                sources[heir].append(dev)
    return MigrationPlan(tuple(moves), {d: tuple(s) for d, s in sources.items()},
                         mapping, new_mapping, tuple(devices))


class Transport(Protocol):
    def send(self, src: str, dst: str, payload) -> None: ...
    def recv(self, dst: str) -> list[tuple[str, object]]: ...


class InMemoryTransport:
    """Mailboxes in one process. Payloads are pickled on send so receivers
    never share memory with senders."""

    def __init__(self):
        self._boxes: dict[str, list[tuple[str, bytes]]] = defaultdict(list)
        self.bytes_sent = 0

    def send(self, src: str, dst: str, payload) -> None:
        blob = pickle.dumps(payload, protocol=pickle.HIGHEST_PROTOCOL)
        self.bytes_sent += len(blob)
        self._boxes[dst].append((src, blob))

    def recv(self, dst: str) -> list[tuple[str, object]]:
        got = self._boxes.pop(dst, [])
        return [(src, pickle.loads(blob)) for src, blob in got]


def migrate_state(plan: MigrationPlan, world: World, transport: Transport | None = None) -> World:
    """Gather parameters and trackers onto the post-resize device set."""
    if plan.is_noop:
        return world
    transport = transport or InMemoryTransport()
    for dst, srcs in sorted(plan.state_sources.items()):
        for src in srcs:
            if src not in world.replicas:
                raise MigrationError(f"no surviving source {src!r} for device {dst!r}")
            rep = world.replicas[src]
            transport.send(src, dst, (rep.params, rep.kernels))

    specs = {d.device_id: d for d in plan.new_devices}
    replicas = {}
    for dst, srcs in sorted(plan.state_sources.items()):
        got = dict(transport.recv(dst))
        if set(got) != set(srcs):
            raise MigrationError(f"device {dst!r} missed state from {set(srcs) - set(got)}")
        params = got[srcs[0]][0]
        for src in srcs[1:]:
            if not got[src][0].bitwise_equal(params):
                raise MigrationError(f"replicas {srcs[0]!r} and {src!r} disagree")
        kernels_state = StatefulKernelState.merge([got[s][1] for s in srcs])
        replicas[dst] = Replica(specs[dst], params, kernels_state)
    return World(replicas, world.step, world.log)


# -- training with a resize schedule --------------------------------------------

@dataclass
class TrainConfig:
    spec: ModelSpec
    global_batch: int
    num_nodes: int
    devices: list[DeviceSpec]
    steps: int
    lr: float = 0.05
    data_seed: int = 0
    dataset_size: int | None = None
    parallel: bool = False

    def dataset(self):
        size = self.dataset_size or 16 * self.global_batch
        return synth_dataset(self.data_seed, size, self.spec.input_width,
                             self.spec.output_width, task_for(self.spec))


@dataclass
class TrainingRun:
    world: World
    params: list[ParamVector] = field(default_factory=list)  # after every step
    metrics: list[StepMetrics] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)


def load_schedule(doc: Iterable[Mapping], job_id: str = "job") -> list[ResizeRequest]:
    """``[{"step": s, "devices": [...]}, ...]`` to resize requests."""
    out = []
    for item in doc:
        devs = tuple(DeviceSpec.from_dict(d) if isinstance(d, Mapping) else DeviceSpec(str(d))
                     for d in item["devices"])
        out.append(ResizeRequest(job_id, devs, int(item["step"])))
    return sorted(out, key=lambda r: r.effective_step)


def run_training(config: TrainConfig, schedule: Sequence[ResizeRequest] = (),
                 transport: Transport | None = None, on_step=None) -> TrainingRun:
    params = init_model(config.spec)
    mapping = make_uniform_mapping(config.global_batch, config.num_nodes, config.devices)
    world = World.create(params, config.devices, StatefulKernelState.initial(config.spec))
    data = config.dataset()
    pending = sorted(schedule, key=lambda r: r.effective_step)
    run = TrainingRun(world)
    for step in range(config.steps):
        while pending and pending[0].effective_step <= step:
            req = pending.pop(0)
            plan = plan_resize(mapping, req.new_devices)
            world = migrate_state(plan, world, transport)
            mapping = plan.new_mapping
            run.events.append({"kind": "resize", "step": step, "plan": plan})
        run.events.append({"kind": "step", "step": step,
                           "assignments": {d: list(n) for d, n in mapping.assignments.items()}})
        world, met = train_step(world, mapping, data.step_batch(step, config.global_batch),
                                config.lr, parallel=config.parallel)
        run.params.append(world.params)
        run.metrics.append(met)
        if on_step is not None:
            on_step(step, world, met)
    run.world = world
    return run


@dataclass(frozen=True)
class TrajectoryReport:
    divergence: tuple[float, ...]  # max per-element |difference| after each step

    @property
    def max_divergence(self) -> float:
        return max(self.divergence, default=0.0)

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"step": i, "max_divergence": d}) + "\n"
                       for i, d in enumerate(self.divergence))


def trajectory_divergence(a: Sequence[ParamVector], b: Sequence[ParamVector]) -> TrajectoryReport:
    if len(a) != len(b):
        raise ValueError("trajectories differ in length")
    return TrajectoryReport(tuple(float(np.max(np.abs(x.values - y.values))) if len(x) else 0.0
                                  for x, y in zip(a, b)))


def resized_training_equivalence_harness(schedule: Sequence[ResizeRequest],
                                         workload: TrainConfig) -> TrajectoryReport:
    """Run ``workload`` with and without ``schedule`` and compare step by step."""
    plain = run_training(workload)
    resized = run_training(workload, schedule)
    return trajectory_divergence(plain.params, resized.params)
