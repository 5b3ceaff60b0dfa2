"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Compiles each ``*_loops`` kernel with numba directly, so the comparison runs
whatever ``FASURV_DISABLE_NUMBA`` says. Compile time is excluded (one warm-up
call). Prints best-of-``repeat`` wall time per path and the speedup.
"""
import argparse
import time

import numba
import numpy as np

from fasurv import kernels as kn


def best_of(fn, args, repeat):
    fn(*args)  # warm-up / compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(scale, rng):
    n = int(4000 * scale)
    T = rng.integers(1, 41, size=n).astype(np.int64)
    e = rng.integers(0, 3, size=n).astype(np.int64)
    risk = np.cumsum(rng.random((n, 40)) * 0.02, axis=1)
    n_obs = int(400 * scale)
    step = rng.integers(0, 200, size=n_obs).astype(np.int64)
    feat = rng.integers(0, 8, size=n_obs).astype(np.int64)
    key = np.unique(step * 8 + feat)
    step, feat = key // 8, key % 8
    val = rng.normal(size=key.size)
    hz = rng.random((int(20000 * scale), 2)) * 0.05
    unif = rng.random((hz.shape[0], 40))
    return {
        "locf_fill": ("_locf_fill", (200, np.zeros(8), step, feat, val)),
        "km_censoring": ("_km_censoring", (T, e, 40)),
        "concordance": ("_concordance", (T, e, risk, 1)),
        "simulate": ("_simulate", (hz, 0.01, unif)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for name, (stem, a) in cases(args.scale, rng).items():
        jit = numba.njit(getattr(kn, stem + "_loops"))
        ref = getattr(kn, stem + "_numpy")
        tj = best_of(jit, a, args.repeat)
        tn = best_of(ref, a, args.repeat)
        print(f"{name:<14}{tj * 1e3:>12.3f}{tn * 1e3:>12.3f}{tn / tj:>9.1f}x")


if __name__ == "__main__":
    main()
