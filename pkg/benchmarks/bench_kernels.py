"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run directly:  python3 benchmarks/bench_kernels.py
The same fallback path is what you get package-wide with LRIMPUTE_NO_NUMBA=1.
"""

import time

import numpy as np

from lrimpute import kernels


def best_of(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_jacobi(n, repeats, rng):
    base = rng.normal(size=(n, n))

    def run(use_numba):
        a = base.copy()
        v = np.eye(n)
        kernels.jacobi_orthogonalize(a, v, use_numba=use_numba)

    t_nb = best_of(lambda: run(True), repeats) if kernels.HAVE_NUMBA else float("nan")
    t_np = best_of(lambda: run(False), repeats)
    return t_nb, t_np


def bench_fft(n, batch, repeats, rng):
    base = (rng.normal(size=(batch, n)) + 1j * rng.normal(size=(batch, n))).astype(np.complex128)

    def run(use_numba):
        kernels.fft_radix2(base.copy(), use_numba=use_numba)

    t_nb = best_of(lambda: run(True), repeats) if kernels.HAVE_NUMBA else float("nan")
    t_np = best_of(lambda: run(False), repeats)
    return t_nb, t_np


def main():
    print(f"numba available: {kernels.HAVE_NUMBA}   enabled: {kernels.NUMBA_ENABLED}")
    rng = np.random.default_rng(0)
    if kernels.HAVE_NUMBA:
        kernels.warmup()

    print("\none-sided Jacobi orthogonalization (n x n)")
    print(f"{'n':>6} {'numba [ms]':>12} {'numpy [ms]':>12} {'speedup':>9}")
    for n in (8, 16, 32, 64, 128):
        t_nb, t_np = bench_jacobi(n, repeats=5, rng=rng)
        print(f"{n:>6} {t_nb * 1e3:>12.3f} {t_np * 1e3:>12.3f} {t_np / t_nb:>9.1f}x")

    print("\nradix-2 FFT (batch 64 rows)")
    print(f"{'n':>6} {'numba [ms]':>12} {'numpy [ms]':>12} {'speedup':>9}")
    for n in (64, 256, 1024, 4096):
        t_nb, t_np = bench_fft(n, batch=64, repeats=10, rng=rng)
        print(f"{n:>6} {t_nb * 1e3:>12.3f} {t_np * 1e3:>12.3f} {t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
