"""Compare the compiled and numpy alpha-grid kernels.

Usage: python benchmarks/bench_kernels.py [--rows 500] [--draws 64] [--grid 1001]
"""
import argparse
import time

import numpy as np

from civae import kernels


def inputs(rows, draws, seed=0):
    rng = np.random.default_rng(seed)
    e0, e1 = rng.normal(size=rows), rng.normal(size=rows)
    logs = [rng.normal(size=(rows, draws)) for _ in range(4)]
    return e0, e1, *logs


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=500)
    ap.add_argument("--draws", type=int, default=64)
    ap.add_argument("--grid", type=int, default=1001)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    data = inputs(args.rows, args.draws)
    alphas = np.linspace(0, 1, args.grid)
    print(f"rows={args.rows} draws={args.draws} grid={args.grid}")
    ref = kernels.alpha_grid_values(*data, alphas, backend="python")
    t_py = best_of(lambda: kernels.alpha_grid_values(*data, alphas, backend="python"), args.repeats)
    print(f"numpy   {t_py * 1e3:9.1f} ms")
    if kernels.BACKEND != "cython":
        print("compiled extension not built; skipping")
        return
    out = kernels.alpha_grid_values(*data, alphas, backend="cython")
    t_c = best_of(lambda: kernels.alpha_grid_values(*data, alphas, backend="cython"), args.repeats)
    print(f"cython  {t_c * 1e3:9.1f} ms   speedup {t_py / t_c:.1f}x   max|diff| {np.abs(out - ref).max():.2e}")


if __name__ == "__main__":
    main()
