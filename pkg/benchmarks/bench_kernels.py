"""Compare the compiled kernels against the numpy fallback.

Run from the repository root after an editable install::

    python benchmarks/bench_kernels.py --repeats 5
"""
import argparse
import time

import numpy as np

from efft import _kernels
from efft.tensor import Rng, randn


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(size):
    rng = Rng(0)
    a, b = randn([size, size], 1.0, rng), randn([size, size], 1.0, rng)
    a3, b3 = randn([8, size // 2, size // 2], 1.0, rng), randn([8, size // 2, size // 2], 1.0, rng)
    core, u, v = randn([12, 8, 8], 1.0, rng), randn([4 * size, 8], 1.0, rng), randn([size, 8], 1.0, rng)
    sv = randn([size, size // 2], 1.0, rng)

    def jacobi(k):
        wt = np.ascontiguousarray(sv.T.copy())
        k.jacobi_sweeps(wt, np.eye(wt.shape[0]), 1e-12, 80)

    return {
        f"matmul2d {size}x{size}": lambda k: k.matmul2d(a, b),
        f"matmul_batched 8x{size // 2}": lambda k: k.matmul_batched(a3, b3),
        f"tt_materialize 12x{4 * size}x{size}": lambda k: k.tt_materialize(core, u, v, 2.0),
        f"jacobi_sweeps {size}x{size // 2}": jacobi,
        "normal_fill 100k": lambda k: k.normal_fill(12345, 100_000, 1.0),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args(argv)

    backends = [("python", _kernels.python_backend)]
    if _kernels.compiled_backend is not None:
        backends.insert(0, ("cython", _kernels.compiled_backend))
    else:
        print("compiled kernels not built; timing the numpy fallback only")

    print(f"{'kernel':<34}" + "".join(f"{name:>12}" for name, _ in backends) + "     speedup")
    for label, fn in cases(args.size).items():
        times = [_time(lambda k=k: fn(k), args.repeats) for _, k in backends]
        row = f"{label:<34}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(times) == 2:
            row += f"  {times[1] / times[0]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
