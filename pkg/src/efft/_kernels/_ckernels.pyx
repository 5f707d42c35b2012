# cython: language_level=3
"""Compiled kernels. Accumulation order matches ``_pykernels`` exactly."""
import numpy as np

cimport numpy as cnp
from libc.math cimport cos, fabs, hypot, log, sin, sqrt
from libc.stdint cimport uint64_t

cnp.import_array()

BACKEND = "cython"

cdef double TWO_PI = 6.283185307179586
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _xorshift64star(uint64_t *state) nogil:
    cdef uint64_t x = state[0]
    x ^= x >> 12
    x ^= x << 25
    x ^= x >> 27
    state[0] = x
    return x * <uint64_t>0x2545F4914F6CDD1D


def next_u64(uint64_t state, Py_ssize_t n):
    """Return ``(draws, new_state)`` for ``n`` raw 64-bit outputs."""
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] ov = out
    cdef uint64_t st = state
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            ov[i] = _xorshift64star(&st)
    return out, st


def normal_fill(uint64_t state, Py_ssize_t n, double sigma):
    """Box-Muller normals scaled by ``sigma``; returns ``(values, new_state)``."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef uint64_t st = state
    cdef Py_ssize_t i = 0
    cdef double u1, u2, r, th
    with nogil:
        while i < n:
            u1 = (<double>((_xorshift64star(&st) >> 11) + 1)) * INV_2_53
            u2 = (<double>(_xorshift64star(&st) >> 11)) * INV_2_53
            r = sqrt(-2.0 * log(u1))
            th = TWO_PI * u2
            ov[i] = sigma * (r * cos(th))
            i += 1
            if i < n:
                ov[i] = sigma * (r * sin(th))
                i += 1
    return out, st


cdef void _mm(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] c) noexcept nogil:
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, p, j
    cdef double aip
    for i in range(m):
        for j in range(n):
            c[i, j] = 0.0
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                c[i, j] = c[i, j] + aip * b[p, j]


def matmul2d(const double[:, ::1] a, const double[:, ::1] b):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] c = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    cdef double[:, ::1] cv = c
    with nogil:
        _mm(a, b, cv)
    return c


def matmul_batched(const double[:, :, ::1] a, const double[:, :, ::1] b):
    cdef Py_ssize_t nb = a.shape[0], t
    cdef cnp.ndarray[cnp.float64_t, ndim=3] c = np.empty((nb, a.shape[1], b.shape[2]), dtype=np.float64)
    cdef double[:, :, ::1] cv = c
    with nogil:
        for t in range(nb):
            _mm(a[t], b[t], cv[t])
    return c


def tt_materialize(const double[:, :, ::1] core, const double[:, ::1] u, const double[:, ::1] v, double s):
    """``out[i] = s * ((u @ core[i]) @ v.T)`` for every slot ``i``."""
    cdef Py_ssize_t nslot = core.shape[0], r1 = core.shape[1], r2 = core.shape[2]
    cdef Py_ssize_t m = u.shape[0], n = v.shape[0]
    cdef Py_ssize_t i, j, k, t1, t2
    cdef double acc, inner
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.empty((nslot, m, n), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef double[::1] row = np.empty(r2, dtype=np.float64)
    with nogil:
        for i in range(nslot):
            for j in range(m):
                for t2 in range(r2):
                    inner = 0.0
                    for t1 in range(r1):
                        inner = inner + u[j, t1] * core[i, t1, t2]
                    row[t2] = inner
                for k in range(n):
                    acc = 0.0
                    for t2 in range(r2):
                        acc = acc + row[t2] * v[k, t2]
                    ov[i, j, k] = s * acc
    return out


def jacobi_sweeps(double[:, ::1] wt, double[:, ::1] vt, double tol, int max_sweeps):
    """One-sided Jacobi on the rows of ``wt`` (columns of the input).

    Rotations are mirrored onto ``vt``. Both arrays are modified in place.
    Returns the number of sweeps performed.
    """
    cdef Py_ssize_t n = wt.shape[0], m = wt.shape[1], nv = vt.shape[1]
    cdef Py_ssize_t p, q, i
    cdef int sweep = 0, rotated
    cdef double alpha, beta, gamma, zeta, t, c, sn, wp, wq
    with nogil:
        while sweep < max_sweeps:
            sweep += 1
            rotated = 0
            for p in range(n - 1):
                for q in range(p + 1, n):
                    alpha = 0.0
                    beta = 0.0
                    gamma = 0.0
                    for i in range(m):
                        alpha = alpha + wt[p, i] * wt[p, i]
                        beta = beta + wt[q, i] * wt[q, i]
                        gamma = gamma + wt[p, i] * wt[q, i]
                    if gamma == 0.0 or fabs(gamma) <= tol * sqrt(alpha) * sqrt(beta):
                        continue
                    rotated += 1
                    zeta = (beta - alpha) / (2.0 * gamma)
                    if zeta >= 0.0:
                        t = 1.0 / (zeta + hypot(1.0, zeta))
                    else:
                        t = -1.0 / (-zeta + hypot(1.0, zeta))
                    c = 1.0 / sqrt(1.0 + t * t)
                    sn = c * t
                    for i in range(m):
                        wp = wt[p, i]
                        wq = wt[q, i]
                        wt[p, i] = c * wp - sn * wq
                        wt[q, i] = sn * wp + c * wq
                    for i in range(nv):
                        wp = vt[p, i]
                        wq = vt[q, i]
                        vt[p, i] = c * wp - sn * wq
                        vt[q, i] = sn * wp + c * wq
            if rotated == 0:
                break
    return sweep
