"""Numpy fallback kernels.

Matmul, materialization and the random streams round exactly like the
compiled kernels: every reduction runs sequentially over the inner index,
with separate multiply and add (no fused multiply-add). Jacobi uses a
round-robin pair ordering so each step is vectorized; its results agree
with the compiled cyclic ordering only to rounding.
"""
import math

import numpy as np

BACKEND = "python"

_MASK = 0xFFFFFFFFFFFFFFFF
_MULT = 0x2545F4914F6CDD1D
_TWO_PI = 6.283185307179586
_INV_2_53 = 1.0 / 9007199254740992.0


def _step(x):
    x ^= x >> 12
    x ^= (x << 25) & _MASK
    x ^= x >> 27
    return x, (x * _MULT) & _MASK


def next_u64(state, n):
    out = np.empty(n, dtype=np.uint64)
    x = int(state)
    for i in range(n):
        x, out[i] = _step(x)
    return out, x


def normal_fill(state, n, sigma):
    out = np.empty(n, dtype=np.float64)
    x = int(state)
    i = 0
    while i < n:
        x, a = _step(x)
        x, b = _step(x)
        u1 = float((a >> 11) + 1) * _INV_2_53
        u2 = float(b >> 11) * _INV_2_53
        r = math.sqrt(-2.0 * math.log(u1))
        th = _TWO_PI * u2
        out[i] = sigma * (r * math.cos(th))
        i += 1
        if i < n:
            out[i] = sigma * (r * math.sin(th))
            i += 1
    return out, x


def matmul2d(a, b):
    m, k = a.shape
    c = np.zeros((m, b.shape[1]))
    tmp = np.empty_like(c)
    for p in range(k):
        np.multiply(a[:, p, None], b[None, p, :], out=tmp)
        c += tmp
    return c


def matmul_batched(a, b):
    nb, m, k = a.shape
    c = np.zeros((nb, m, b.shape[2]))
    tmp = np.empty_like(c)
    for p in range(k):
        np.multiply(a[:, :, p, None], b[:, None, p, :], out=tmp)
        c += tmp
    return c


def tt_materialize(core, u, v, s):
    vt = np.ascontiguousarray(v.T)
    out = np.empty((core.shape[0], u.shape[0], v.shape[0]))
    for i in range(core.shape[0]):
        out[i] = s * matmul2d(matmul2d(u, core[i]), vt)
    return out


def _round_robin(n):
    """Rounds of disjoint index pairs covering every pair once (circle method)."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_sweeps(wt, vt, tol, max_sweeps):
    rounds = _round_robin(wt.shape[0])
    sweep = 0
    while sweep < max_sweeps:
        sweep += 1
        rotated = 0
        for P, Q in rounds:
            wp, wq = wt[P], wt[Q]
            alpha = np.einsum("ij,ij->i", wp, wp)
            beta = np.einsum("ij,ij->i", wq, wq)
            gamma = np.einsum("ij,ij->i", wp, wq)
            hit = (gamma != 0.0) & (np.abs(gamma) > tol * np.sqrt(alpha) * np.sqrt(beta))
            if not hit.any():
                continue
            rotated += int(hit.sum())
            P, Q = P[hit], Q[hit]
            alpha, beta, gamma = alpha[hit], beta[hit], gamma[hit]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0.0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            sn = c * t
            for arr in (wt, vt):
                xp, xq = arr[P], arr[Q]
                arr[P] = c[:, None] * xp - sn[:, None] * xq
                arr[Q] = sn[:, None] * xp + c[:, None] * xq
        if rotated == 0:
            break
    return sweep
