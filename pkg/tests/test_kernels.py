import numpy as np
import pytest

from vnode import kernels, _kernels_py

compiled = pytest.mark.skipif("compiled" not in kernels.available(),
                              reason="compiled extension not built")


def _inputs(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((33, 7)) * 10.0 ** rng.integers(-5, 5, (33, 7))
    w = rng.standard_normal((7, 5))
    b = rng.standard_normal(5)
    d = rng.standard_normal((33, 5))
    return x, w, b, d


@compiled
@pytest.mark.parametrize("seed", range(5))
def test_compiled_matches_fallback_bitwise(seed):
    from vnode import _kernels

    x, w, b, d = _inputs(seed)
    assert _kernels.dense_forward(x, w, b).tobytes() == _kernels_py.dense_forward(x, w, b).tobytes()
    assert (_kernels.dense_backward_input(d, w).tobytes()
            == _kernels_py.dense_backward_input(d, w).tobytes())
    la = np.zeros((7 * 5 + 5, 70), dtype=np.int64)
    lb = la.copy()
    for mod, limbs in ((_kernels, la), (_kernels_py, lb)):
        mod.accumulate_outer(limbs, x, d, 0)
        mod.accumulate_rows(limbs, d, 35)
        mod.normalize(limbs)
    assert np.array_equal(la, lb)


def test_dense_forward_is_fixed_order(backend):
    x, w, b, _ = _inputs(9)
    want = b.copy() + np.zeros((x.shape[0], 1))
    for k in range(x.shape[1]):
        want = want + x[:, k, None] * w[k]
    assert kernels.backend().dense_forward(x, w, b).tobytes() == want.tobytes()


def test_dense_close_to_blas(backend):
    x, w, b, d = _inputs(2)
    np.testing.assert_allclose(kernels.backend().dense_forward(x, w, b), x @ w + b,
                               rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(kernels.backend().dense_backward_input(d, w), d @ w.T,
                               rtol=1e-12, atol=1e-12)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.use("gpu")


def test_using_restores_previous():
    before = kernels.backend().NAME
    with kernels.using("python"):
        assert kernels.backend().NAME == "python"
    assert kernels.backend().NAME == before
