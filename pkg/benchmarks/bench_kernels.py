"""Compare the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints median wall time per call for each kernel and the speed-up, after a
warm-up call that absorbs JIT compilation.  Results of both paths are
checked for agreement before timing.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from sgm import _kernels as K


def cases(rng):
    coefs = rng.normal(0, 0.1, size=(4, 8, 8))
    noise = rng.normal(size=(10_000, 8, 4))
    scores = rng.normal(size=20_000).round(2)        # rounding creates ties
    labels = (rng.random(20_000) < 0.1).astype(np.int64)
    a = rng.integers(0, 2, size=(30, 30))
    b = rng.integers(0, 2, size=(30, 30))
    m = np.abs(rng.normal(0, 0.2, size=(30, 30)))
    big_a = rng.normal(size=(238, 238))
    big_b = big_a + (rng.random((238, 238)) < 0.5) * 1e-3
    return {
        "var_simulate (T=1e4, N=8, D=4, L=4)": (lambda impl: impl.var_simulate(coefs, noise, np.zeros((4, 8, 4)))),
        "trace_power (N=30, p=30)": (lambda impl: impl.trace_power(np.eye(30) + m, 30)),
        "auc_rank (n=2e4, ties)": (lambda impl: impl.auc_rank(scores, labels)),
        "shd (N=30)": (lambda impl: impl.shd(a, b)),
        "count_diff (238x238)": (lambda impl: impl.count_diff(big_a, big_b, 0.0)),
    }


def timeit(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} {'numpy [ms]':>12s} {'numba [ms]':>12s} {'speed-up':>9s}")
    for name, call in cases(rng).items():
        ref = call(K.numpy_impl)
        got = call(K.numba_impl)                      # warm-up / compile
        if not np.allclose(ref, got, rtol=1e-12, atol=1e-12):
            raise SystemExit(f"{name}: numba and numpy disagree")
        t_np = timeit(lambda: call(K.numpy_impl), args.repeat)
        t_nb = timeit(lambda: call(K.numba_impl), args.repeat)
        print(f"{name:40s} {1e3 * t_np:12.3f} {1e3 * t_nb:12.3f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
