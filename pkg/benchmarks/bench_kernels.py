"""Compiled kernels vs the numpy fallback.

Times each kernel and a full training step on both backends, and checks the
two produce the same bits while it is at it.

    python3 benchmarks/bench_kernels.py --repeat 20 --json
"""

import argparse
import json
import sys
import timeit

import numpy as np

from vnode import _kernels_py, kernels
from vnode.core import ModelSpec, StatefulKernelState, init_model, synth_dataset
from vnode.virtual import DeviceSpec, World, make_uniform_mapping, train_step


def kernel_cases(rows, width, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rows, width))
    w = rng.standard_normal((width, width))
    b = rng.standard_normal(width)
    d = rng.standard_normal((rows, width))
    n_limbs = 70

    def outer(mod):
        limbs = np.zeros((width * width, n_limbs), dtype=np.int64)
        mod.accumulate_outer(limbs, x, d, 0)
        mod.normalize(limbs)
        return limbs

    return {
        "dense_forward": lambda mod: mod.dense_forward(x, w, b),
        "dense_backward_input": lambda mod: mod.dense_backward_input(d, w),
        "accumulate_outer": outer,
    }


def train_case(steps, devices):
    spec = ModelSpec((16, 64, 16), "tanh", "mse", 0)
    data = synth_dataset(0, 64 * steps, 16, 16)
    devs = [DeviceSpec(f"gpu{i}") for i in range(devices)]
    mapping = make_uniform_mapping(64, 8, devs)

    def run(_mod):
        world = World.create(init_model(spec), devs, StatefulKernelState.initial(spec))
        for s in range(steps):
            world, _ = train_step(world, mapping, data.step_batch(s, 64), 0.05)
        return world.params.values

    return run


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--steps", type=int, default=5, help="training steps in the end-to-end case")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", action="store_true")
    args = p.parse_args(argv)

    if "compiled" not in kernels.available():
        print("compiled extension not built; nothing to compare", file=sys.stderr)
        return 1
    from vnode import _kernels

    cases = kernel_cases(args.rows, args.width, 0)
    cases[f"train_step x{args.steps}"] = train_case(args.steps, 4)
    rows = []
    for name, fn in cases.items():
        timings, outputs = {}, {}
        for backend, mod in (("compiled", _kernels), ("python", _kernels_py)):
            with kernels.using(backend):
                outputs[backend] = np.asarray(fn(mod)).tobytes()
                timings[backend] = best_of(lambda: fn(mod), args.repeat)
        rows.append({"case": name, "compiled_s": timings["compiled"], "python_s": timings["python"],
                     "speedup": timings["python"] / timings["compiled"],
                     "bitwise_equal": outputs["compiled"] == outputs["python"]})

    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        print(f"{'case':<24}{'compiled':>12}{'python':>12}{'speedup':>10}  same bits")
        for r in rows:
            print(f"{r['case']:<24}{r['compiled_s']:>11.5f}s{r['python_s']:>11.5f}s"
                  f"{r['speedup']:>9.1f}x  {r['bitwise_equal']}")
    return 0 if all(r["bitwise_equal"] for r in rows) else 2


if __name__ == "__main__":
    sys.exit(main())
