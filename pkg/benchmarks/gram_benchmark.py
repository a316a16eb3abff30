#!/usr/bin/env python3
"""Compare the jitted and pure-numpy Gram paths.

Run:
    python3 benchmarks/gram_benchmark.py

The jitted path is the default; `LMAGP_NO_NUMBA=1` switches the library
to the numpy fallback globally. This script times both paths in-process
and checks they agree.
"""

import time

import numpy as np

from lmagp.kernel import Hyperparams, PointSet, gram_numpy_path, using_numba
from lmagp import kernel


def bench(fn, *args, reps=5):
    fn(*args)  # warm (and compile, for the jitted path)
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    h = Hyperparams(1.0, 0.05, np.array([1.0, 1.2, 0.7]))
    rng = np.random.default_rng(0)
    print(f"numba path active: {using_numba()}")
    print(f"{'n':>6} {'m':>6} {'numba_ms':>10} {'numpy_ms':>10} {'ratio':>7}  max|diff|")
    for n, m in [(500, 500), (2000, 1000), (4000, 2000), (4000, 4000)]:
        A = PointSet(rng.uniform(0, 10, size=(n, 3)))
        B = PointSet(rng.uniform(0, 10, size=(m, 3)), ids=n + np.arange(m))
        if using_numba():
            t_jit = bench(kernel._gram_njit,
                          A.coords, B.coords,
                          1.0 / h.lengthscales**2, h.signal_var, h.noise_var,
                          A.ids, B.ids)
        else:
            t_jit = float("nan")
        t_np = bench(gram_numpy_path, A, B, h)
        diff = float(np.max(np.abs(
            kernel.gram(A, B, h) - gram_numpy_path(A, B, h))))
        ratio = t_np / t_jit if t_jit == t_jit else float("nan")
        print(f"{n:>6} {m:>6} {t_jit * 1e3:>10.2f} {t_np * 1e3:>10.2f} {ratio:>7.2f}  {diff:.2e}")


if __name__ == "__main__":
    main()
