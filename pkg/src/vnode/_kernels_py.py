"""Pure-numpy kernels.

These must agree bit for bit with the compiled kernels in ``_kernels.pyx``:
every dot product is an explicit left-to-right loop over the reduction index,
with one rounding per multiply and one per add (no fused multiply-add).
"""

import numpy as np

from .exact import LIMB_BITS, NUM_LIMBS

NAME = "python"

_MASK32 = np.int64((1 << LIMB_BITS) - 1)


def dense_forward(x, w, b):
    """z[n, j] = b[j] + x[n, 0] * w[0, j] + x[n, 1] * w[1, j] + ..."""
    n = x.shape[0]
    z = np.empty((n, w.shape[1]), dtype=np.float64)
    z[...] = b
    for k in range(w.shape[0]):
        z += x[:, k, None] * w[k]
    return z


def dense_backward_input(delta, w):
    """dx[n, k] = 0 + delta[n, 0] * w[k, 0] + delta[n, 1] * w[k, 1] + ..."""
    dx = np.zeros((delta.shape[0], w.shape[0]), dtype=np.float64)
    for j in range(w.shape[1]):
        dx += delta[:, j, None] * w[:, j]
    return dx


def _scatter(limbs, values, elems):
    keep = values != 0.0
    if not keep.all():
        values = values[keep]
        elems = elems[keep]
    if values.size == 0:
        return
    if not np.isfinite(values).all():
        raise FloatingPointError("cannot accumulate non-finite values")
    mant, expo = np.frexp(values)
    m53 = (mant * 9007199254740992.0).astype(np.int64)
    sign = np.sign(m53)
    mag = np.abs(m53)
    pos = expo.astype(np.int64) + 1074
    idx = pos >> 5
    sh = pos & 31
    lo = (mag & ((np.int64(1) << (32 - sh)) - 1)) << sh
    rest = mag >> (32 - sh)
    mid = rest & _MASK32
    hi = rest >> 32
    flat = limbs.reshape(-1)
    base = elems.astype(np.int64) * NUM_LIMBS + idx
    nbins = flat.size
    # every digit is < 2**32 and there are far fewer than 2**21 of them per
    # bin, so the float64 bincount sums are exact integers
    for digits, off in ((lo, 0), (mid, 1), (hi, 2)):
        sums = np.bincount(base + off, weights=(sign * digits).astype(np.float64),
                           minlength=nbins)
        flat += sums.astype(np.int64)


_CHUNK = 1 << 20


def accumulate_rows(limbs, rows, offset):
    n, width = rows.shape
    if n > _CHUNK:
        for start in range(0, n, _CHUNK):
            accumulate_rows(limbs, rows[start:start + _CHUNK], offset)
        return
    elems = np.broadcast_to(np.arange(offset, offset + width), (n, width))
    _scatter(limbs, rows.reshape(-1), elems.reshape(-1))


def accumulate_outer(limbs, x, delta, offset):
    """Add x[n, k] * delta[n, j] into element offset + k * J + j, for all n."""
    n, kdim = x.shape
    jdim = delta.shape[1]
    if n > _CHUNK:
        for start in range(0, n, _CHUNK):
            accumulate_outer(limbs, x[start:start + _CHUNK],
                             delta[start:start + _CHUNK], offset)
        return
    prods = x[:, :, None] * delta[:, None, :]
    elems = np.broadcast_to(np.arange(offset, offset + kdim * jdim), (n, kdim * jdim))
    _scatter(limbs, prods.reshape(-1), elems.reshape(-1))


def normalize(limbs):
    for i in range(NUM_LIMBS - 1):
        carry = limbs[:, i] >> LIMB_BITS
        limbs[:, i] -= carry << LIMB_BITS
        limbs[:, i + 1] += carry
