import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from efft.errors import ShapeError
from efft.tensor import Rng, frobenius_norm_sq, matmul, randn, splitmix64, svd, zeros


# Reference streams computed by hand from the generator definitions with
# Python integers (independent of the kernel implementations).
def _ref_xorshift(seed, n):
    mask = (1 << 64) - 1
    _, x = splitmix64(seed)
    out = []
    for _ in range(n):
        x ^= x >> 12
        x ^= (x << 25) & mask
        x ^= x >> 27
        out.append((x * 0x2545F4914F6CDD1D) & mask)
    return out


def test_splitmix64_known_value():
    # First output of splitmix64 from state 0, a widely published constant.
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF


def test_rng_matches_reference_stream():
    assert Rng(42).next_u64(10).tolist() == _ref_xorshift(42, 10)


def test_rng_deterministic_and_seed_sensitive():
    a, b, c = Rng(7), Rng(7), Rng(8)
    assert np.array_equal(a.next_u64(5), b.next_u64(5))
    assert not np.array_equal(Rng(7).next_u64(5), c.next_u64(5))


def test_uniform_range_and_moments():
    u = Rng(3).uniform(20000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01


def test_randn_moments():
    x = randn([200, 100], 2.0, Rng(5))
    assert abs(x.mean()) < 0.05
    assert abs(x.std() - 2.0) < 0.05


def test_randn_zero_sigma_and_bad_shape(rng):
    assert np.array_equal(randn([3, 4], 0.0, rng), np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        randn([0, 3], 1.0, rng)
    with pytest.raises(ShapeError):
        randn([], 1.0, rng)
    with pytest.raises(ShapeError):
        zeros([2, -1])


def test_permutation_is_permutation():
    p = Rng(11).permutation(50)
    assert sorted(p.tolist()) == list(range(50))
    assert not np.array_equal(p, np.arange(50))


def test_spawn_does_not_advance_parent():
    a = Rng(9)
    a.spawn(1)
    assert np.array_equal(a.next_u64(3), Rng(9).next_u64(3))
    assert not np.array_equal(Rng(9).spawn(1).next_u64(3), Rng(9).spawn(2).next_u64(3))


def test_matmul_against_naive_loop(rng):
    a, b = randn([4, 3], 1.0, rng), randn([3, 5], 1.0, rng)
    ref = np.zeros((4, 5))
    for i in range(4):
        for j in range(5):
            acc = 0.0
            for p in range(3):
                acc += a[i, p] * b[p, j]
            ref[i, j] = acc
    assert np.array_equal(matmul(a, b), ref)


def test_matmul_nd_and_batched(rng):
    a = randn([2, 3, 4], 1.0, rng)
    b = randn([4, 5], 1.0, rng)
    assert np.allclose(matmul(a, b), a @ b, atol=1e-14)
    bb = randn([2, 4, 6], 1.0, rng)
    assert np.allclose(matmul(a, bb), a @ bb, atol=1e-14)


def test_matmul_shape_errors(rng):
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 2, 3)), np.ones((3, 3, 2)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 2)))


def test_frobenius():
    assert frobenius_norm_sq(np.array([[3.0, 4.0]])) == 25.0


def _check_svd(a, res):
    k = min(a.shape)
    assert res.u.shape == (a.shape[0], k) and res.s.shape == (k,) and res.vt.shape == (k, a.shape[1])
    assert np.all(np.diff(res.s) <= 1e-12 * max(res.s[0], 1.0))
    assert np.allclose(res.u.T @ res.u, np.eye(k), atol=1e-10)
    assert np.allclose((res.u * res.s) @ res.vt, a, atol=1e-10 * max(1.0, np.abs(a).max()))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
def test_svd_reconstructs_and_matches_lapack(m, n, seed):
    a = randn([m, n], 1.0, Rng(seed))
    res = svd(a)
    _check_svd(a, res)
    assert np.allclose(res.s, np.linalg.svd(a, compute_uv=False), atol=1e-10)


def test_svd_sign_convention(rng):
    a = randn([6, 4], 1.0, rng)
    u = svd(a).u
    for j in range(u.shape[1]):
        col = u[:, j]
        first = col[np.abs(col) > 1e-12 * np.abs(col).max()][0]
        assert first > 0


def test_svd_rank_deficient_completion():
    a = np.zeros((5, 3))
    a[:, 0] = [1, 2, 3, 4, 5]
    res = svd(a)
    assert res.s[1] == 0.0 and res.s[2] == 0.0
    assert np.allclose(res.u.T @ res.u, np.eye(3), atol=1e-12)
    _check_svd(a, res)


def test_svd_does_not_mutate_input(rng):
    for shape in ([3, 7], [7, 3]):
        a = randn(shape, 1.0, rng)
        keep = a.copy()
        svd(a)
        assert np.array_equal(a, keep)


def test_svd_rejects_bad_input():
    with pytest.raises(ShapeError):
        svd(np.ones(3))
    with pytest.raises(ValueError):
        svd(np.array([[1.0, np.nan]]))
