"""Exact, order-independent summation of float64 vectors.

Every finite double is an integer multiple of 2**-1074, so a sum of doubles is
an integer in units of ``2**-SCALE_BITS``. ``ExactSum`` keeps that integer per
element as a row of signed 32-bit digits stored in int64 limbs, which leaves
room for about 2**30 additions before carries need to be propagated.

Because integer addition is associative, the accumulated value does not depend
on how the additions were grouped or ordered. Rounding happens exactly once, in
:meth:`ExactSum.to_float`, where Python's correctly rounded ``int / int`` does
the work.
"""

from __future__ import annotations

import numpy as np

# value * 2**SCALE_BITS is an integer for every finite double
SCALE_BITS = 1127
LIMB_BITS = 32
# 2098 value bits + 53 mantissa bits fit in 68 limbs; two more absorb carries
NUM_LIMBS = 70
_NORMALIZE_AFTER = 1 << 30
_LIMB_MASK = (1 << LIMB_BITS) - 1


class ExactSum:
    """Exact accumulator for ``size`` parallel sums."""

    __slots__ = ("limbs", "size", "_pending")

    def __init__(self, size: int):
        self.size = int(size)
        self.limbs = np.zeros((self.size, NUM_LIMBS), dtype=np.int64)
        self._pending = 0

    @property
    def nbytes_modeled(self) -> int:
        return 8 * self.size

    def note_additions(self, count: int) -> None:
        """Record that each limb received up to ``count`` more 32-bit digits."""
        self._pending += int(count)
        if self._pending >= _NORMALIZE_AFTER:
            self.normalize()

    def add_rows(self, rows: np.ndarray, offset: int = 0) -> None:
        """Add every row of ``rows`` (shape ``(n, width)``) into elements
        ``offset .. offset + width``."""
        from . import kernels

        rows = np.ascontiguousarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        if offset < 0 or offset + rows.shape[1] > self.size:
            raise ValueError("rows do not fit the accumulator")
        kernels.backend().accumulate_rows(self.limbs, rows, offset)
        self.note_additions(3 * rows.shape[0])

    def merge(self, other: "ExactSum") -> None:
        if other.size != self.size:
            raise ValueError(f"size mismatch: {self.size} vs {other.size}")
        self.limbs += other.limbs
        self.note_additions(other._pending)

    def copy(self) -> "ExactSum":
        out = ExactSum(self.size)
        out.limbs[...] = self.limbs
        out._pending = self._pending
        return out

    def normalize(self) -> None:
        """Propagate carries so limbs 0..n-2 lie in [0, 2**32)."""
        from . import kernels

        kernels.backend().normalize(self.limbs)
        self._pending = 1

    def to_ints(self) -> list[int]:
        """The exact sums, as integers in units of ``2**-SCALE_BITS``."""
        self.normalize()
        low = self.limbs[:, : NUM_LIMBS - 1].astype("<u4")
        top = self.limbs[:, NUM_LIMBS - 1]
        shift = LIMB_BITS * (NUM_LIMBS - 1)
        out = []
        for row, hi in zip(low, top):
            value = int.from_bytes(row.tobytes(), "little")
            if hi:
                value += int(hi) << shift
            out.append(value)
        return out

    def to_float(self, divisor: int = 1) -> np.ndarray:
        """Correctly rounded ``sum / divisor`` for every element."""
        if divisor <= 0:
            raise ValueError("divisor must be positive")
        denom = int(divisor) << SCALE_BITS
        return np.array([v / denom for v in self.to_ints()], dtype=np.float64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ExactSum):
            return NotImplemented
        return self.size == other.size and self.to_ints() == other.to_ints()
