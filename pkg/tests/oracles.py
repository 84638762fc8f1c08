"""Reference implementations that share no code with the package.

They use BLAS matmuls and numpy reductions, so they agree with the package to
rounding error, never bitwise; tests compare against them with tolerances.
"""

import itertools

import numpy as np


def unpack(widths, values):
    layers, pos = [], 0
    for a, b in zip(widths, widths[1:]):
        w = values[pos:pos + a * b].reshape(a, b)
        pos += a * b
        layers.append((w, values[pos:pos + b]))
        pos += b
    return layers


def act(kind, z):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def forward(widths, activation, values, x):
    """Layer inputs and the network output."""
    layers = unpack(widths, values)
    inputs, h = [], x
    for i, (w, b) in enumerate(layers):
        inputs.append(h)
        z = h @ w + b
        h = act(activation, z) if i < len(layers) - 1 else z
    return inputs, h


def preactivations(widths, activation, values, x):
    layers = unpack(widths, values)
    out, h = [], x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        out.append(z)
        h = act(activation, z)
    return out


def mean_loss(widths, activation, loss, values, x, t):
    _, out = forward(widths, activation, values, x)
    if loss == "mse":
        return float(np.mean(np.mean((out - t) ** 2, axis=1)))
    shifted = out - out.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(np.mean(-(t * logp).sum(axis=1)))


def mean_grad(widths, activation, loss, values, x, t):
    layers = unpack(widths, values)
    inputs, pre, h = [], [], x
    for i, (w, b) in enumerate(layers):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = act(activation, z) if i < len(layers) - 1 else z
    n, width = t.shape
    if loss == "mse":
        d = 2.0 * (h - t) / width / n
    else:
        p = np.exp(h - h.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        d = (p * t.sum(axis=1, keepdims=True) - t) / n
    grads = []
    for i in reversed(range(len(layers))):
        w, _ = layers[i]
        grads = [(inputs[i].T @ d).ravel(), d.sum(axis=0)] + grads
        if i:
            da = d @ w.T
            z = pre[i - 1]
            if activation == "tanh":
                d = da * (1.0 - np.tanh(z) ** 2)
            elif activation == "relu":
                d = da * (z > 0)
            else:
                d = da
    return np.concatenate(grads)


def sgd_trajectory(widths, activation, loss, values, batches, lr):
    """Single-device full-batch SGD; parameters after every step."""
    out = []
    for x, t in batches:
        values = values - lr * mean_grad(widths, activation, loss, values, x, t)
        out.append(values)
    return out


def running_stats(mean, var, x, momentum):
    """One exponential-moving-average update from a micro-batch."""
    bm = x.mean(axis=0)
    bv = x.var(axis=0)
    return momentum * mean + (1 - momentum) * bm, momentum * var + (1 - momentum) * bv


def batch_grid(max_b):
    """Powers of two and three times powers of two, up to ``max_b``."""
    out, p = set(), 1
    while p <= max_b:
        out.add(p)
        if 3 * p <= max_b:
            out.add(3 * p)
        p *= 2
    return sorted(out)


def solver_optimum(curves, pool, B, v_cap, mode="any"):
    """Smallest predicted step time by brute force, or None.

    ``curves`` maps type -> (points {micro: seconds}, comm seconds); ``pool``
    maps type -> (count, capacity). ``mode`` restricts the search to
    assignments using one type ("single") or several ("mixed").
    """
    vs = [v for v in range(1, v_cap + 1) if v & (v - 1) == 0]
    per_type = []
    for t, (count, cap) in pool.items():
        if count == 0:
            continue
        points, _ = curves[t]
        cost = {}  # per-device batch -> cheapest time
        for m, tm in points.items():
            if m > cap:
                continue
            for v in vs:
                cost[m * v] = min(cost.get(m * v, float("inf")), tm * v)
        opts = [(t, 0, 0, 0.0)]
        opts += [(t, n, b, c) for n in range(1, count + 1) for b, c in cost.items() if n * b <= B]
        per_type.append(opts)
    if not per_type:
        return None
    *head, last = per_type
    by_total = {}
    for o in last:
        by_total.setdefault(o[1] * o[2], []).append(o)
    best = None
    for combo in itertools.product(*head):
        used = sum(n * b for _, n, b, _ in combo)
        for o in by_total.get(B - used, []):
            parts = [p for p in (*combo, o) if p[1] > 0]
            if not parts or (mode == "mixed" and len(parts) < 2) or (
                    mode == "single" and len(parts) > 1):
                continue
            devices = sum(p[1] for p in parts)
            comm = max(curves[p[0]][1] for p in parts) if devices > 1 else 0.0
            time = max(p[3] for p in parts) + comm
            if best is None or time < best:
                best = time
    return best


def random_solver_instance(rng):
    """(curves, pool, B, v_cap) with up to 3 types and 4 devices per type."""
    types = rng.sample(["A", "B", "C"], rng.randint(1, 3))
    curves, pool = {}, {}
    for t in types:
        # times on an eighth grid so ties actually happen
        pts = {b: rng.randint(1, 40) / 8 for b in batch_grid(rng.choice([4, 8, 16]))}
        curves[t] = (pts, rng.choice([0.0, 0.0, 0.5, 1.25]))
        pool[t] = (rng.randint(0, 4), rng.choice([2, 4, 8, 16]))
    if not any(c for c, _ in pool.values()):
        pool[types[0]] = (1, pool[types[0]][1])
    return curves, pool, rng.randint(1, 64), rng.choice([1, 2, 4, 8])
