"""Time the compiled and pure-numpy kernel backends on correlation builds.

Usage: python benchmarks/bench_kernel.py [--reps 200]
"""

import argparse
import timeit

import numpy as np

from treedgp import _kernel_py

try:
    from treedgp import _kernel_core
except ImportError:
    _kernel_core = None


def bench(backend, X, reps):
    d = np.array([0.3])
    t_factor = timeit.timeit(lambda: backend.factor_corr(X, d, 0.05, 2.0, True), number=reps)
    t_cross = timeit.timeit(lambda: backend.cross_corr(X[:50], X, d, 2.0, True), number=reps)
    return 1e3 * t_factor / reps, 1e3 * t_cross / reps


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--reps", type=int, default=200)
    args = p.parse_args()
    backends = [("python", _kernel_py)]
    if _kernel_core is not None:
        backends.append(("cython", _kernel_core))
    rng = np.random.default_rng(0)
    print("n,backend,factor_ms,cross_ms")
    for n in (20, 60, 133, 300):
        X = rng.uniform(size=(n, 1))
        for name, mod in backends:
            f, c = bench(mod, X, args.reps)
            print(f"{n},{name},{f:.4f},{c:.4f}")


if __name__ == "__main__":
    main()
