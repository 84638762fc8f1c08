"""Deterministic dense-network training core.

A small multilayer perceptron with float64 parameters stored in one flat
vector. Dot products run through :mod:`vnode.kernels` in a fixed order and
per-example gradient contributions are summed exactly, so the mean gradient
of a batch is the correctly rounded mean no matter how the batch is split.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import kernels
from .exact import ExactSum

ACTIVATIONS = ("relu", "tanh", "identity")
LOSSES = ("mse", "softmax-cross-entropy")
DEFAULT_MOMENTUM = 0.9

Layout = tuple[tuple[str, tuple[int, ...]], ...]


class ShapeError(ValueError):
    pass


def _philox(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for one named stream of ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ModelSpec:
    widths: tuple[int, ...]
    activation: str = "relu"
    loss: str = "mse"
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise ValueError("a model needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    def layout(self) -> Layout:
        out = []
        for i, (fan_in, fan_out) in enumerate(zip(self.widths, self.widths[1:])):
            out.append((f"dense{i}.weight", (fan_in, fan_out)))
            out.append((f"dense{i}.bias", (fan_out,)))
        return tuple(out)

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout())

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activation": self.activation,
                "loss": self.loss, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(widths=tuple(d["widths"]), activation=d.get("activation", "relu"),
                   loss=d.get("loss", "mse"), seed=d.get("seed", 0))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 vector plus the (name, shape) records that carve it up."""

    values: np.ndarray
    layout: Layout
    spec: ModelSpec | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple((n, tuple(s)) for n, s in self.layout))
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if values.size != expected:
            raise ShapeError(f"{values.size} values for a layout of {expected}")

    def __len__(self) -> int:
        return self.values.size

    @property
    def nbytes(self) -> int:
        return 8 * self.values.size

    def offsets(self) -> dict[str, int]:
        out, pos = {}, 0
        for name, shape in self.layout:
            out[name] = pos
            pos += int(np.prod(shape))
        return out

    def views(self) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = self.values[pos:pos + size].reshape(shape)
            pos += size
        return out

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout, self.spec)

    def bitwise_equal(self, other: "ParamVector") -> bool:
        return (self.layout == other.layout
                and self.values.tobytes() == other.values.tobytes())

    def check_layout(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise ShapeError("parameter layouts differ")


@dataclass(frozen=True, eq=False)
class Batch:
    examples: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        ex = np.ascontiguousarray(self.examples, dtype=np.float64)
        lab = np.ascontiguousarray(self.labels, dtype=np.float64)
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if ex.ndim != 2 or lab.ndim != 2:
            raise ShapeError("examples and labels must be matrices")
        if not (ex.shape[0] == lab.shape[0] == ids.size):
            raise ShapeError("examples, labels and ids disagree on count")
        if ids.size < 1:
            raise ShapeError("a batch holds at least one example")
        if np.unique(ids).size != ids.size:
            raise ShapeError("example ids must be distinct")
        object.__setattr__(self, "examples", ex)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return self.ids.size

    def slice(self, start: int, stop: int) -> "Batch":
        return Batch(self.examples[start:stop], self.labels[start:stop], self.ids[start:stop])

    @staticmethod
    def concat(parts: Sequence["Batch"]) -> "Batch":
        return Batch(np.concatenate([p.examples for p in parts]),
                     np.concatenate([p.labels for p in parts]),
                     np.concatenate([p.ids for p in parts]))


@dataclass(frozen=True, eq=False)
class StatefulKernelState:
    """Running mean/variance of every dense layer's input.

    Lives on one device and is never synchronized, which is what makes it
    need migrating when devices come and go.
    """

    means: tuple[np.ndarray, ...]
    variances: tuple[np.ndarray, ...]
    momentum: float = DEFAULT_MOMENTUM
    examples_seen: int = 0

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if any((v < 0).any() for v in self.variances):
            raise ValueError("variances must be non-negative")

    @classmethod
    def initial(cls, spec: ModelSpec, momentum: float = DEFAULT_MOMENTUM) -> "StatefulKernelState":
        widths = spec.widths[:-1]
        return cls(tuple(np.zeros(w) for w in widths), tuple(np.ones(w) for w in widths),
                   momentum, 0)

    def update(self, layer_inputs: Sequence[np.ndarray]) -> "StatefulKernelState":
        m = self.momentum
        means, variances = [], []
        for mean, var, x in zip(self.means, self.variances, layer_inputs):
            bm = x.mean(axis=0)
            bv = ((x - bm) ** 2).mean(axis=0)
            means.append(m * mean + (1.0 - m) * bm)
            variances.append(m * var + (1.0 - m) * bv)
        n = layer_inputs[0].shape[0]
        return StatefulKernelState(tuple(means), tuple(variances), m, self.examples_seen + n)

    @staticmethod
    def merge(states: Sequence["StatefulKernelState"]) -> "StatefulKernelState":
        """Example-count-weighted average; a single state is returned as is."""
        if not states:
            raise ValueError("nothing to merge")
        if len(states) == 1:
            return states[0]
        total = sum(s.examples_seen for s in states)
        if total == 0:
            return states[0]
        means, variances = [], []
        for layer in range(len(states[0].means)):
            mean = np.zeros_like(states[0].means[layer])
            var = np.zeros_like(states[0].variances[layer])
            for s in states:
                w = s.examples_seen / total
                mean = mean + w * s.means[layer]
                var = var + w * s.variances[layer]
            means.append(mean)
            variances.append(var)
        return StatefulKernelState(tuple(means), tuple(variances), states[0].momentum, total)

    def bitwise_equal(self, other: "StatefulKernelState") -> bool:
        return (self.momentum == other.momentum
                and self.examples_seen == other.examples_seen
                and all(a.tobytes() == b.tobytes() for a, b in zip(self.means, other.means))
                and all(a.tobytes() == b.tobytes() for a, b in zip(self.variances, other.variances)))

    def max_abs_diff(self, other: "StatefulKernelState") -> float:
        diffs = [np.max(np.abs(a - b)) for a, b in zip(self.means + self.variances,
                                                       other.means + other.variances)]
        return float(max(diffs, default=0.0))


def init_model(spec: ModelSpec) -> ParamVector:
    """Glorot-normal weights and zero biases, drawn from ``spec.seed``."""
    rng = _philox(spec.seed, 0)
    parts = []
    for name, shape in spec.layout():
        if name.endswith(".weight"):
            scale = np.sqrt(2.0 / (shape[0] + shape[1]))
            parts.append(rng.standard_normal(shape).reshape(-1) * scale)
        else:
            parts.append(np.zeros(shape))
    return ParamVector(np.concatenate(parts), spec.layout(), spec)


def zeros_like(params: ParamVector) -> ParamVector:
    return params.with_values(np.zeros(len(params)))


# -- forward / backward -----------------------------------------------------

def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.where(z > 0.0, z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(kind: str, z: np.ndarray, a: np.ndarray, da: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.where(z > 0.0, da, 0.0)
    if kind == "tanh":
        return da * (1.0 - a * a)
    return da


def _row_sum(cols: np.ndarray) -> np.ndarray:
    # left to right over the last axis
    acc = cols[:, 0].copy()
    for j in range(1, cols.shape[1]):
        acc += cols[:, j]
    return acc


def _loss_and_grad(kind: str, out: np.ndarray, target: np.ndarray):
    """Per-example loss values and d(loss)/d(out)."""
    width = out.shape[1]
    if kind == "mse":
        diff = out - target
        per_example = _row_sum(diff * diff) / width
        return per_example, diff * (2.0 / width)
    top = out.max(axis=1, keepdims=True)
    e = np.exp(out - top)
    s = _row_sum(e)
    lse = top[:, 0] + np.log(s)
    per_example = _row_sum(target * (lse[:, None] - out))
    prob = e / s[:, None]
    return per_example, prob * _row_sum(target)[:, None] - target


@dataclass
class GradientSums:
    """Exact sums over a batch: loss, gradient, and how many examples."""

    loss: ExactSum
    grads: ExactSum
    count: int = 0
    layer_inputs: list[np.ndarray] = field(default_factory=list)


def gradient_sums(params: ParamVector, batch: Batch, into: GradientSums | None = None) -> GradientSums:
    """Add every example's loss and gradient in ``batch`` exactly into ``into``."""
    spec = params.spec
    if spec is None:
        raise ShapeError("parameters carry no model spec")
    if batch.examples.shape[1] != spec.input_width or batch.labels.shape[1] != spec.output_width:
        raise ShapeError(
            f"batch is {batch.examples.shape[1]}->{batch.labels.shape[1]}, "
            f"model is {spec.input_width}->{spec.output_width}")
    if into is None:
        into = GradientSums(ExactSum(1), ExactSum(len(params)))
    kb = kernels.backend()
    views = params.views()
    offsets = params.offsets()
    n = len(batch)

    inputs, pre = [], []
    a = batch.examples
    for layer in range(spec.num_layers):
        w = views[f"dense{layer}.weight"]
        b = views[f"dense{layer}.bias"]
        inputs.append(a)
        z = kb.dense_forward(a, w, b)
        pre.append(z)
        a = _activate(spec.activation, z) if layer < spec.num_layers - 1 else z

    per_example, delta = _loss_and_grad(spec.loss, a, batch.labels)
    into.loss.add_rows(per_example[:, None])

    for layer in reversed(range(spec.num_layers)):
        delta = np.ascontiguousarray(delta)
        kb.accumulate_outer(into.grads.limbs, inputs[layer], delta,
                            offsets[f"dense{layer}.weight"])
        kb.accumulate_rows(into.grads.limbs, delta, offsets[f"dense{layer}.bias"])
        if layer:
            da = kb.dense_backward_input(delta, views[f"dense{layer}.weight"])
            delta = _activation_grad(spec.activation, pre[layer - 1], inputs[layer], da)
    into.grads.note_additions(3 * n)
    into.count += n
    into.layer_inputs = inputs
    return into


def forward_backward(params: ParamVector, batch: Batch, kernels_state: StatefulKernelState):
    """Mean loss and mean gradient over ``batch``; updates running statistics.

    Returns ``(loss, grads, kernels_state')``.
    """
    sums = gradient_sums(params, batch)
    loss = float(sums.loss.to_float(sums.count)[0])
    grads = params.with_values(sums.grads.to_float(sums.count))
    return loss, grads, kernels_state.update(sums.layer_inputs)


def sgd_apply(params: ParamVector, grads: ParamVector, lr: float) -> ParamVector:
    params.check_layout(grads)
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    return params.with_values(params.values - lr * grads.values)


# -- synthetic data -----------------------------------------------------------

class SyntheticDataset:
    """Seeded regression or classification data.

    Example ``i`` is fixed by ``(seed, i)`` alone, so however the ids are
    sharded or reordered the rows they name never change.
    """

    def __init__(self, seed: int, num_examples: int, input_width: int,
                 output_width: int, task: str = "regression"):
        if min(num_examples, input_width, output_width) < 1:
            raise ValueError("dataset sizes must be positive")
        if task not in ("regression", "classification"):
            raise ValueError(f"unknown task {task!r}")
        self.seed = int(seed)
        self.task = task
        x = _philox(seed, 1).standard_normal((num_examples, input_width))
        teacher = _philox(seed, 2).standard_normal((input_width, output_width))
        scores = x @ teacher / np.sqrt(input_width)
        if task == "regression":
            noise = _philox(seed, 3).standard_normal((num_examples, output_width))
            y = np.tanh(scores) + 0.1 * noise
        else:
            y = np.zeros((num_examples, output_width))
            y[np.arange(num_examples), scores.argmax(axis=1)] = 1.0
        self.examples = x
        self.labels = y
        self.ids = np.arange(num_examples, dtype=np.int64)

    def __len__(self) -> int:
        return self.ids.size

    def batch(self, ids) -> Batch:
        ids = np.asarray(ids, dtype=np.int64)
        return Batch(self.examples[ids], self.labels[ids], ids)

    def epoch_order(self, epoch: int) -> np.ndarray:
        return _philox(self.seed, 4, epoch).permutation(len(self))

    def step_batch(self, step: int, batch_size: int) -> Batch:
        """The global batch for ``step``: consecutive slices of per-epoch
        permutations, dropping any ragged tail."""
        per_epoch = len(self) // batch_size
        if per_epoch < 1:
            raise ValueError(f"batch size {batch_size} exceeds dataset size {len(self)}")
        epoch, k = divmod(step, per_epoch)
        order = self.epoch_order(epoch)
        return self.batch(order[k * batch_size:(k + 1) * batch_size])

    def __iter__(self) -> Iterator[Batch]:
        for i in self.ids:
            yield self.batch([i])


def synth_dataset(seed: int, num_examples: int, input_width: int, output_width: int,
                  task: str = "regression") -> SyntheticDataset:
    return SyntheticDataset(seed, num_examples, input_width, output_width, task)


def task_for(spec: ModelSpec) -> str:
    return "classification" if spec.loss == "softmax-cross-entropy" else "regression"
