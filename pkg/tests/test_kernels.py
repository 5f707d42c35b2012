"""The compiled and numpy backends must agree (bit-for-bit where documented)."""
import numpy as np
import pytest

from efft import _kernels
from efft.tensor import Rng, randn

cy = _kernels.compiled_backend
py = _kernels.python_backend
needs_compiled = pytest.mark.skipif(cy is None, reason="compiled kernels not built")


def test_active_backend_reported():
    assert _kernels.BACKEND in ("cython", "python")
    assert py.BACKEND == "python"


@needs_compiled
def test_random_streams_identical():
    state = 0x1234567887654321
    a, sa = cy.next_u64(state, 33)
    b, sb = py.next_u64(state, 33)
    assert np.array_equal(a, b) and sa == sb
    a, sa = cy.normal_fill(state, 17, 0.5)
    b, sb = py.normal_fill(state, 17, 0.5)
    assert np.array_equal(a, b) and sa == sb


@needs_compiled
def test_matmul_bit_identical():
    rng = Rng(2)
    a, b = randn([13, 7], 1.0, rng), randn([7, 9], 1.0, rng)
    assert np.array_equal(cy.matmul2d(a, b), py.matmul2d(a, b))
    a3, b3 = randn([3, 5, 4], 1.0, rng), randn([3, 4, 6], 1.0, rng)
    assert np.array_equal(cy.matmul_batched(a3, b3), py.matmul_batched(a3, b3))


@needs_compiled
def test_tt_materialize_bit_identical():
    rng = Rng(3)
    core, u, v = randn([5, 3, 2], 1.0, rng), randn([8, 3], 1.0, rng), randn([6, 2], 1.0, rng)
    assert np.array_equal(cy.tt_materialize(core, u, v, 1.7), py.tt_materialize(core, u, v, 1.7))


@pytest.mark.parametrize("backend", [b for b in (cy, py) if b is not None],
                         ids=lambda b: b.BACKEND)
def test_jacobi_orthogonalizes(backend):
    a = randn([6, 4], 1.0, Rng(4))
    wt = np.ascontiguousarray(a.T.copy())
    vt = np.eye(4)
    sweeps = backend.jacobi_sweeps(wt, vt, 1e-12, 80)
    assert 0 < sweeps <= 80
    g = wt @ wt.T
    off = g - np.diag(np.diag(g))
    assert np.abs(off).max() < 1e-10
    # Rotations are orthogonal and applied consistently: wt = vt @ a.T
    assert np.allclose(vt @ a.T, wt, atol=1e-12)
    assert np.allclose(vt @ vt.T, np.eye(4), atol=1e-12)
