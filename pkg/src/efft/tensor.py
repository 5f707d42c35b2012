"""Dense float64 tensors, seeded random streams, matmul and Jacobi SVD.

Tensors are plain C-contiguous ``numpy.float64`` arrays. Hot loops
(matmul, SVD sweeps, tensor-train materialization, random streams) run in
the kernel backend chosen by :mod:`efft._kernels`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._kernels import active as _k
from .errors import ShapeError

Tensor = np.ndarray

_MASK = 0xFFFFFFFFFFFFFFFF
_INV_2_53 = 1.0 / 9007199254740992.0

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 80


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(new_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return x, z ^ (z >> 31)


class Rng:
    """xorshift64* generator seeded through splitmix64.

    Step: ``x ^= x >> 12; x ^= x << 25; x ^= x >> 27``; output
    ``x * 0x2545F4914F6CDD1D mod 2**64``. The seed is passed once through
    splitmix64 (increment ``0x9E3779B97F4A7C15``, multipliers
    ``0xBF58476D1CE4E5B9`` and ``0x94D049BB133111EB``) so that small seeds
    give well-mixed, nonzero states. Integer and uniform streams are
    identical on every platform; normals additionally depend on libm
    ``log``/``cos``/``sin``.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK
        _, state = splitmix64(self.seed)
        self.state = state or 0x9E3779B97F4A7C15

    def next_u64(self, n: int) -> np.ndarray:
        out, self.state = _k.next_u64(self.state, int(n))
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normal(self, shape: Sequence[int], sigma: float = 1.0) -> Tensor:
        return randn(shape, sigma, self)

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers in ``[0, high)`` by multiply-shift on the top 32 bits."""
        top = self.next_u64(n) >> np.uint64(32)
        return ((top * np.uint64(high)) >> np.uint64(32)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        draws = self.next_u64(max(n - 1, 0))
        for idx, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[idx] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream; does not advance this generator."""
        _, mixed = splitmix64(self.state ^ ((int(tag) * 0xD1B54A32D192ED03) & _MASK))
        return Rng(mixed)


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ShapeError(f"invalid shape {shape}: dimensions must be positive")
    return shape


def randn(shape: Sequence[int], sigma: float, rng: Rng) -> Tensor:
    """I.i.d. ``N(0, sigma**2)`` entries from Box-Muller on ``rng``."""
    shape = _check_shape(shape)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    n = int(np.prod(shape))
    vals, rng.state = _k.normal_fill(rng.state, n, float(sigma))
    if sigma == 0:
        vals = np.zeros(n)
    return vals.reshape(shape)


def zeros(shape: Sequence[int]) -> Tensor:
    return np.zeros(_check_shape(shape))


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with a fixed sequential accumulation order.

    Accepts ``(m,k)@(k,n)``, ``(...,m,k)@(k,n)`` (leading dims flattened)
    and batched ``(B,m,k)@(B,k,n)``.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim not in (2, 3):
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        lead = a.shape[:-1]
        c = _k.matmul2d(a.reshape(-1, a.shape[-1]), b)
        return c.reshape(lead + (b.shape[1],))
    if a.ndim != 3 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"batched matmul needs equal batch dims: {a.shape} @ {b.shape}")
    return _k.matmul_batched(a, b)


def frobenius_norm_sq(a: Tensor) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sum(a * a))


@dataclass(frozen=True)
class SvdResult:
    u: Tensor   # m x k, orthonormal columns
    s: Tensor   # k, descending
    vt: Tensor  # k x n


def _complete_columns(u: Tensor, missing: np.ndarray) -> None:
    """Fill the columns listed in ``missing`` with an orthonormal completion."""
    m = u.shape[0]
    have = [j for j in range(u.shape[1]) if j not in set(missing.tolist())]
    for j in missing:
        basis = u[:, have]
        best, best_norm = None, -1.0
        for e in range(m):
            cand = np.zeros(m)
            cand[e] = 1.0
            for _ in range(2):
                cand -= basis @ (basis.T @ cand)
            nrm = np.linalg.norm(cand)
            if nrm > best_norm:
                best, best_norm = cand, nrm
            if nrm > 0.5:
                break
        u[:, j] = best / best_norm
        have.append(int(j))


def svd(a: Tensor) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Sweeps stop once every column pair has cosine below ``SVD_TOL``.
    Singular values are sorted descending; each left singular vector is
    signed so its first entry above 1e-12 (relative) is positive.
    Columns for exactly-zero singular values are completed to an
    orthonormal set.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"svd needs a 2-D tensor, got shape {a.shape}")
    m, n = a.shape
    if min(m, n) < 1:
        raise ShapeError("svd needs min(m, n) >= 1")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input has non-finite entries")
    flip = m < n
    work = a.T if flip else a
    k = work.shape[1]
    wt = np.array(work.T, dtype=np.float64, order="C", copy=True)
    vrows = np.eye(k)
    _k.jacobi_sweeps(wt, vrows, SVD_TOL, SVD_MAX_SWEEPS)

    s = np.sqrt(np.einsum("ij,ij->i", wt, wt))
    order = np.argsort(-s, kind="stable")
    s, wt, vrows = s[order], wt[order], vrows[order]
    zero = s <= np.finfo(np.float64).tiny
    u = np.zeros((work.shape[0], k))
    nz = ~zero
    u[:, nz] = (wt[nz] / s[nz, None]).T
    if zero.any():
        _complete_columns(u, np.flatnonzero(zero))
        s = np.where(zero, 0.0, s)

    if flip:
        u, vrows = vrows.T.copy(), u.T.copy()
    for j in range(u.shape[1]):
        col = u[:, j]
        thresh = 1e-12 * np.max(np.abs(col))
        first = np.flatnonzero(np.abs(col) > thresh)
        if first.size and col[first[0]] < 0:
            u[:, j] = -col
            vrows[j] = -vrows[j]
    return SvdResult(np.ascontiguousarray(u), s, np.ascontiguousarray(vrows))
