"""Virtual-node execution.

A global batch is cut into virtual nodes by id. Each device runs its nodes one
after another (one wave per node), folding every node's gradient into a single
model-sized buffer; the buffers are then reduced across devices and divided by
the global batch size once. Because the buffers hold exact sums, the reduced
gradient and hence the parameter update are identical for every way of mapping
the same virtual nodes onto devices.
"""

from __future__ import annotations

import json
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

from .core import (Batch, GradientSums, ParamVector, StatefulKernelState, ShapeError,
                   gradient_sums, sgd_apply)
from .exact import ExactSum


class CapacityError(ValueError):
    """A micro-batch does not fit a device's memory capacity."""

    def __init__(self, message: str, device_id: str | None = None, node_id: int | None = None):
        super().__init__(message)
        self.device_id = device_id
        self.node_id = node_id


class ConsistencyError(RuntimeError):
    """Replicas that should hold identical parameters do not."""


@dataclass(frozen=True)
class VirtualNode:
    id: int
    micro_batch_size: int


@dataclass(frozen=True)
class DeviceSpec:
    device_id: str
    device_type: str = "generic"
    memory_capacity: int = 1 << 30  # max examples in one forward/backward pass

    def to_dict(self) -> dict:
        return {"device_id": self.device_id, "device_type": self.device_type,
                "memory_capacity": self.memory_capacity}

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceSpec":
        return cls(d["device_id"], d.get("device_type", "generic"),
                   int(d.get("memory_capacity", 1 << 30)))


@dataclass(frozen=True, eq=False)
class VirtualNodeMapping:
    """Which device runs which virtual nodes, and how big each node is."""

    assignments: Mapping[str, tuple[int, ...]]
    sizes: Mapping[int, int]

    def __post_init__(self):
        assignments = {d: tuple(sorted(int(n) for n in nodes))
                       for d, nodes in sorted(self.assignments.items())}
        sizes = {int(k): int(v) for k, v in sorted(self.sizes.items())}
        object.__setattr__(self, "assignments", assignments)
        object.__setattr__(self, "sizes", sizes)
        seen = [n for nodes in assignments.values() for n in nodes]
        if sorted(seen) != list(range(len(sizes))) or len(seen) != len(set(seen)):
            raise ValueError("every virtual node 0..V-1 must sit on exactly one device")
        if any(s < 1 for s in sizes.values()):
            raise ValueError("micro-batch sizes must be positive")

    @property
    def num_nodes(self) -> int:
        return len(self.sizes)

    @property
    def global_batch(self) -> int:
        return sum(self.sizes.values())

    @property
    def devices(self) -> list[str]:
        return list(self.assignments)

    def nodes(self) -> list[VirtualNode]:
        return [VirtualNode(i, s) for i, s in self.sizes.items()]

    def device_of(self, node_id: int) -> str:
        for d, nodes in self.assignments.items():
            if node_id in nodes:
                return d
        raise KeyError(node_id)

    def starts(self) -> dict[int, int]:
        """First example offset of each node: nodes tile the batch in id order."""
        out, pos = {}, 0
        for i, size in self.sizes.items():
            out[i] = pos
            pos += size
        return out

    def check_capacity(self, devices: Iterable[DeviceSpec]) -> None:
        specs = {d.device_id: d for d in devices}
        for dev, nodes in self.assignments.items():
            if dev not in specs:
                raise ValueError(f"mapping names unknown device {dev!r}")
            cap = specs[dev].memory_capacity
            for n in nodes:
                if self.sizes[n] > cap:
                    raise CapacityError(
                        f"virtual node {n} holds {self.sizes[n]} examples but device "
                        f"{dev!r} fits {cap}", device_id=dev, node_id=n)

    def same_as(self, other: "VirtualNodeMapping") -> bool:
        return self.assignments == other.assignments and self.sizes == other.sizes

    def to_dict(self) -> dict:
        return {"assignments": {d: list(n) for d, n in self.assignments.items()},
                "sizes": [self.sizes[i] for i in range(self.num_nodes)]}


def make_mapping(sizes: Sequence[int], assignments: Mapping[str, Sequence[int]]) -> VirtualNodeMapping:
    return VirtualNodeMapping({d: tuple(n) for d, n in assignments.items()},
                              dict(enumerate(sizes)))


def round_robin(num_nodes: int, device_ids: Sequence[str]) -> dict[str, tuple[int, ...]]:
    out: dict[str, list[int]] = {d: [] for d in device_ids}
    for n in range(num_nodes):
        out[device_ids[n % len(device_ids)]].append(n)
    return {d: tuple(v) for d, v in out.items()}


def make_uniform_mapping(global_batch: int, num_nodes: int,
                         devices: Sequence[DeviceSpec]) -> VirtualNodeMapping:
    """``num_nodes`` equal virtual nodes dealt round-robin over ``devices``."""
    if not devices:
        raise ValueError("need at least one device")
    if num_nodes < len(devices):
        raise ValueError(f"{num_nodes} virtual nodes cannot cover {len(devices)} devices")
    if global_batch % num_nodes:
        raise ValueError(f"{num_nodes} virtual nodes do not divide batch {global_batch}")
    size = global_batch // num_nodes
    for d in devices:
        if size > d.memory_capacity:
            raise CapacityError(f"micro-batch of {size} exceeds capacity {d.memory_capacity} "
                                f"of device {d.device_id!r}", device_id=d.device_id)
    ids = [d.device_id for d in devices]
    return VirtualNodeMapping(round_robin(num_nodes, ids), {i: size for i in range(num_nodes)})


@dataclass
class GradientBuffer:
    """Model-sized accumulator shared by all virtual nodes on one device."""

    accum: ExactSum
    loss: ExactSum
    like: ParamVector
    examples_accumulated: int = 0

    @classmethod
    def empty(cls, like: ParamVector) -> "GradientBuffer":
        return cls(ExactSum(len(like)), ExactSum(1), like)

    @property
    def nbytes(self) -> int:
        # modeled as one float64 per parameter, like the model itself
        return self.accum.nbytes_modeled

    def value(self) -> ParamVector:
        """The buffer rounded once: sum over nodes of size * mean gradient."""
        return self.like.with_values(self.accum.to_float())


@dataclass(frozen=True)
class DeviceMetrics:
    device_id: str
    waves: int
    examples: int
    peak_resident: int
    buffer_bytes: int


@dataclass(frozen=True)
class StepMetrics:
    step: int
    loss: float
    per_device: tuple[DeviceMetrics, ...]

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step,
            "loss": self.loss,
            "per_device": [
                {"device_id": m.device_id, "waves": m.waves, "examples": m.examples,
                 "peak_resident": m.peak_resident, "buffer_bytes": m.buffer_bytes}
                for m in self.per_device
            ],
        }, sort_keys=False)


def prefetched(items: Iterable, depth: int = 1) -> Iterator:
    """Yield ``items`` while a background thread stays ``depth`` ahead."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    error: list[BaseException] = []

    def fill():
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # noqa: BLE001
            error.append(exc)
        finally:
            q.put(done)

    t = threading.Thread(target=fill, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    t.join()
    if error:
        raise error[0]


def device_step(params: ParamVector, kernels_state: StatefulKernelState,
                nodes: Sequence[Batch], prefetch: bool = False):
    """Run micro-batches in order, accumulating into one buffer.

    Returns ``(buffer, kernels_state')``.
    """
    if len(nodes) == 0:
        raise ValueError("a device with no virtual nodes must not be stepped")
    buf = GradientBuffer.empty(params)
    sums = GradientSums(buf.loss, buf.accum)
    source = prefetched(nodes) if prefetch else iter(nodes)
    for micro in source:
        gradient_sums(params, micro, into=sums)
        kernels_state = kernels_state.update(sums.layer_inputs)
    buf.examples_accumulated = sums.count
    return buf, kernels_state


def _reduce(buffers: Sequence[tuple[GradientBuffer, str]]) -> GradientBuffer:
    if not buffers:
        raise ValueError("no gradient buffers to synchronize")
    ordered = sorted(buffers, key=lambda pair: pair[1])
    first = ordered[0][0]
    total = GradientBuffer.empty(first.like)
    for buf, _ in ordered:
        first.like.check_layout(buf.like)
        total.accum.merge(buf.accum)
        total.loss.merge(buf.loss)
        total.examples_accumulated += buf.examples_accumulated
    if total.examples_accumulated == 0:
        raise ValueError("synchronizing zero examples")
    return total


def sync_gradients(buffers: Sequence[tuple[GradientBuffer, str]]) -> ParamVector:
    """Example-weighted average of all device buffers: sum of buffers over B."""
    total = _reduce(buffers)
    return total.like.with_values(total.accum.to_float(total.examples_accumulated))


@dataclass(frozen=True, eq=False)
class Replica:
    device: DeviceSpec
    params: ParamVector
    kernels: StatefulKernelState


@dataclass(eq=False)
class World:
    """Per-device replicas of one training job."""

    replicas: dict[str, Replica]
    step: int = 0
    log: list = field(default_factory=list)

    @classmethod
    def create(cls, params: ParamVector, devices: Sequence[DeviceSpec],
               kernels_state: StatefulKernelState) -> "World":
        return cls({d.device_id: Replica(d, params, kernels_state) for d in devices})

    @property
    def devices(self) -> list[DeviceSpec]:
        return [self.replicas[d].device for d in sorted(self.replicas)]

    @property
    def params(self) -> ParamVector:
        self.check_consistent()
        return self.replicas[min(self.replicas)].params

    def check_consistent(self) -> None:
        ids = sorted(self.replicas)
        ref = self.replicas[ids[0]].params
        for d in ids[1:]:
            if not self.replicas[d].params.bitwise_equal(ref):
                raise ConsistencyError(f"replica on {d!r} diverged from {ids[0]!r}")


def node_batches(mapping: VirtualNodeMapping, batch: Batch) -> dict[int, Batch]:
    if len(batch) != mapping.global_batch:
        raise ShapeError(f"batch of {len(batch)} but mapping covers {mapping.global_batch}")
    starts = mapping.starts()
    return {i: batch.slice(starts[i], starts[i] + s) for i, s in mapping.sizes.items()}


def train_step(world: World, mapping: VirtualNodeMapping, batch: Batch, lr: float,
               parallel: bool = False, prefetch: bool = False) -> tuple[World, StepMetrics]:
    """One synchronous step: waves on every device, sync, identical update."""
    world.check_consistent()
    if set(mapping.devices) != set(world.replicas):
        raise ValueError("mapping and world disagree on the device set")
    mapping.check_capacity(world.devices)
    slices = node_batches(mapping, batch)

    def run(dev: str):
        rep = world.replicas[dev]
        micro = [slices[n] for n in mapping.assignments[dev]]
        buf, ks = device_step(rep.params, rep.kernels, micro, prefetch=prefetch)
        return dev, buf, ks

    order = sorted(mapping.assignments)
    if parallel and len(order) > 1:
        with ThreadPoolExecutor(max_workers=len(order)) as pool:
            results = list(pool.map(run, order))
    else:
        results = [run(d) for d in order]

    total = _reduce([(buf, dev) for dev, buf, _ in results])
    grad = total.like.with_values(total.accum.to_float(total.examples_accumulated))
    loss = float(total.loss.to_float(total.examples_accumulated)[0])

    replicas, per_device = {}, []
    for dev, buf, ks in results:
        rep = world.replicas[dev]
        replicas[dev] = Replica(rep.device, sgd_apply(rep.params, grad, lr), ks)
        nodes = mapping.assignments[dev]
        per_device.append(DeviceMetrics(
            device_id=dev, waves=len(nodes), examples=buf.examples_accumulated,
            peak_resident=max(mapping.sizes[n] for n in nodes), buffer_bytes=buf.nbytes))
    metrics = StepMetrics(world.step, loss, tuple(per_device))
    return World(replicas, world.step + 1, world.log), metrics
