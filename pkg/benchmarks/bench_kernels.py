#!/usr/bin/env python3
"""Time the numba kernels against their pure-numpy fallbacks.

The backend is selected per call through the REQUANT_NUMBA environment
variable, so one process can measure both sides. The first numba call pays
JIT compilation; a warmup call absorbs it before timing starts. Outputs are
cross-checked before anything is timed.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--scale X]
"""

from __future__ import annotations

import argparse
import os
import time

import numpy as np

from requant import kernels


def timeit(fn, repeats: int, inner: int) -> float:
    """Best-of-``repeats`` mean seconds per call over ``inner`` calls."""
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def make_cases(scale: float, rng: np.random.Generator):
    n_fields = int(1_000_000 * scale)
    fields = rng.integers(0, 16, n_fields).astype(np.uint64)
    packed = kernels.pack_fields(fields, 4)

    n_vals = int(200_000 * scale)
    values = rng.normal(size=n_vals)
    centroids = np.sort(rng.normal(size=16))

    r = c = max(int(512 * np.sqrt(scale)), 32)
    group = 16
    codes = rng.integers(-7, 8, (r, c)).astype(np.int16)
    scales = rng.uniform(0.01, 0.1, (r, -(-c // group))).astype(np.float32)
    col_div = rng.uniform(0.5, 2.0, c)
    detached = (rng.random((r, c)) < 0.005).astype(np.uint8)
    x = rng.normal(size=c)
    table = rng.normal(size=16)

    nnz = int(50_000 * scale)
    rows = rng.integers(0, r, nnz)
    cols = rng.integers(0, c, nnz)
    vals = rng.normal(size=nnz)

    return [
        ("pack_fields", f"{n_fields / 1e6:g}M x 4b",
         lambda: kernels.pack_fields(fields, 4), 5),
        ("unpack_fields", f"{n_fields / 1e6:g}M x 4b",
         lambda: kernels.unpack_fields(packed, 4, n_fields), 5),
        ("nearest_index", f"{n_vals / 1e3:g}k vs 16",
         lambda: kernels.nearest_index(values, centroids), 5),
        ("matvec_uniform", f"{r}x{c} g={group}",
         lambda: kernels.matvec_uniform(codes, scales, group, col_div,
                                        detached, x), 20),
        ("matvec_codebook", f"{r}x{c} K=16",
         lambda: kernels.matvec_codebook(codes + 7, table, detached, x), 20),
        ("coo_accumulate", f"{nnz / 1e3:g}k nnz",
         lambda: kernels.coo_accumulate(np.zeros(r), rows, cols, vals, x), 20),
    ]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5,
                    help="timing repetitions, best one wins")
    ap.add_argument("--scale", type=float, default=1.0,
                    help="problem size multiplier")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if not kernels.HAS_NUMBA:
        print("numba is not importable; only the numpy fallback exists here")
        return 1

    cases = make_cases(args.scale, np.random.default_rng(args.seed))

    print(f"{'kernel':<18} {'size':<14} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    print("-" * 64)
    for name, size, fn, inner in cases:
        os.environ[kernels.ENV_FLAG] = "0"
        want = fn()
        os.environ[kernels.ENV_FLAG] = "1"
        got = fn()  # also the JIT warmup
        if not np.allclose(np.asarray(got, dtype=np.float64),
                           np.asarray(want, dtype=np.float64),
                           rtol=1e-9, atol=1e-12):
            raise SystemExit(f"{name}: backends disagree")

        os.environ[kernels.ENV_FLAG] = "0"
        t_np = timeit(fn, args.repeats, inner)
        os.environ[kernels.ENV_FLAG] = "1"
        t_nb = timeit(fn, args.repeats, inner)
        print(f"{name:<18} {size:<14} {t_np * 1e3:>8.3f}ms {t_nb * 1e3:>8.3f}ms "
              f"{t_np / t_nb:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
