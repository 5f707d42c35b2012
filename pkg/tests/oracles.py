"""Independent reference implementations used by the tests.

Everything here is written with plain Python loops and floats, without
calling into the package's kernels, so agreement is meaningful.
"""
import itertools

import numpy as np


def naive_tt_slots(core, u, v, s):
    """``out[i, j, k] = s * sum_t2 (sum_t1 U[j,t1] core[i,t1,t2]) V[k,t2]``.

    Sums start at 0.0 and run in increasing index order, the documented
    accumulation order of the optimized kernel.
    """
    n, r1, r2 = core.shape
    rows, cols = u.shape[0], v.shape[0]
    out = np.zeros((n, rows, cols))
    for i in range(n):
        for j in range(rows):
            inner = []
            for t2 in range(r2):
                acc = 0.0
                for t1 in range(r1):
                    acc += float(u[j, t1]) * float(core[i, t1, t2])
                inner.append(acc)
            for k in range(cols):
                acc = 0.0
                for t2 in range(r2):
                    acc += inner[t2] * float(v[k, t2])
                out[i, j, k] = float(s) * acc
    return out


def enumerate_scalars(tensors):
    """Count parameters one scalar at a time."""
    count = 0
    for t in tensors:
        for _ in itertools.product(*(range(n) for n in np.shape(t))):
            count += 1
    return count


def least_squares_probe_accuracy(x, labels, n_classes):
    """Closed-form ridge-free least-squares classifier on raw features."""
    x = np.hstack([x.reshape(len(x), -1), np.ones((len(x), 1))])
    y = np.eye(n_classes)[labels]
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    return float(np.mean(np.argmax(x @ w, axis=1) == labels))
