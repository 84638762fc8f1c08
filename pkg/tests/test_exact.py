from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vnode import kernels
from vnode.exact import SCALE_BITS, ExactSum

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


def exact_oracle(rows):
    return [sum((Fraction(v) for v in col), Fraction(0)) for col in np.asarray(rows).T]


def rounded(frac, divisor=1):
    # Fraction -> float is correctly rounded
    return float(frac / divisor)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(finite, min_size=3, max_size=3), min_size=1, max_size=20))
def test_matches_fraction_oracle(rows):
    acc = ExactSum(3)
    acc.add_rows(np.array(rows))
    ints = acc.to_ints()
    for got, want in zip(ints, exact_oracle(rows)):
        assert Fraction(got, 1 << SCALE_BITS) == want


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=40),
       st.integers(1, 9), st.randoms(use_true_random=False))
def test_order_and_grouping_do_not_matter(vals, divisor, rnd):
    rows = np.array(vals)[:, None]
    whole = ExactSum(1)
    whole.add_rows(rows)
    perm = list(range(len(vals)))
    rnd.shuffle(perm)
    cut = rnd.randrange(1, len(vals))
    a, b = ExactSum(1), ExactSum(1)
    a.add_rows(rows[perm[:cut]])
    b.add_rows(rows[perm[cut:]])
    b.merge(a)
    assert b == whole
    assert b.to_float(divisor)[0] == rounded(sum(map(Fraction, vals), Fraction(0)), divisor)


def test_extreme_magnitudes(backend):
    vals = np.array([[1e308], [-1e308], [5e-324], [1e308], [2.5e-320], [-1e-300]])
    acc = ExactSum(1)
    acc.add_rows(vals)
    assert acc.to_float()[0] == rounded(exact_oracle(vals)[0])


def test_cancellation_is_exact():
    acc = ExactSum(1)
    acc.add_rows(np.array([[1e16], [1.0], [-1e16]]))
    assert acc.to_float()[0] == 1.0  # naive summation gives 0


def test_outer_products_are_exact(backend):
    rng = np.random.default_rng(5)
    x, d = rng.standard_normal((7, 3)), rng.standard_normal((7, 2))
    acc = ExactSum(6)
    kernels.backend().accumulate_outer(acc.limbs, x, d, 0)
    acc.note_additions(3 * 7)
    # each product is rounded to a double once; the sum of those is exact
    want = [sum(Fraction(float(x[n, i] * d[n, j])) for n in range(7))
            for i in range(3) for j in range(2)]
    assert [Fraction(v, 1 << SCALE_BITS) for v in acc.to_ints()] == want


def test_many_additions_normalize():
    acc = ExactSum(2)
    rows = np.full((1000, 2), 0.1)
    for _ in range(50):
        acc.add_rows(rows)
    assert acc.to_float()[0] == float(Fraction(0.1) * 50000)


def test_non_finite_rejected(backend):
    acc = ExactSum(1)
    with pytest.raises(FloatingPointError):
        acc.add_rows(np.array([[np.inf]]))
    with pytest.raises(FloatingPointError):
        acc.add_rows(np.array([[np.nan]]))


def test_shape_checks():
    acc = ExactSum(2)
    with pytest.raises(ValueError):
        acc.add_rows(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        acc.merge(ExactSum(3))
    with pytest.raises(ValueError):
        acc.to_float(0)
