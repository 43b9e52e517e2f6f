"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run from the repo root:

    python benchmarks/bench_kernels.py [--repeats 50]

Requires numba (do not set INTFF_NO_NUMBA); both implementations are invoked
directly, so the env flag does not matter here.
"""

import argparse
import time

import numpy as np

from intff import kernels


def time_fn(fn, *args, repeats: int = 50) -> float:
    fn(*args)  # warm-up / jit compile
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_normalize(repeats):
    x = np.random.default_rng(0).normal(size=(4096, 784))
    jit = time_fn(kernels.normalize_rows_jit, x, 1e-8, repeats=repeats)
    ref = time_fn(kernels.normalize_rows_numpy, x, 1e-8, repeats=repeats)
    return "normalize_rows (4096x784)", ref, jit


def bench_adam(repeats):
    rng = np.random.default_rng(1)
    shape = (100, 784)
    grad = rng.normal(size=shape)

    def run_jit():
        p, m, v = np.zeros(shape), np.zeros(shape), np.zeros(shape)
        kernels.adam_step_jit(p, grad, m, v, 1, 1e-3, 0.9, 0.999, 1e-8)

    def run_numpy():
        p, m, v = np.zeros(shape), np.zeros(shape), np.zeros(shape)
        kernels.adam_step_numpy(p, grad, m, v, 1, 1e-3, 0.9, 0.999, 1e-8)

    return "adam_step (100x784)", time_fn(run_numpy, repeats=repeats), \
        time_fn(run_jit, repeats=repeats)


def bench_conv_forward(repeats):
    rng = np.random.default_rng(2)
    xp = rng.normal(size=(32, 8, 30, 30))
    k = rng.normal(size=(16, 8, 3, 3))
    b = rng.normal(size=16)
    jit = time_fn(kernels.conv2d_forward_padded_jit, xp, k, b, 1, 28, 28,
                  repeats=repeats)
    ref = time_fn(kernels.conv2d_forward_padded_numpy, xp, k, b, 1, 28, 28,
                  repeats=repeats)
    return "conv2d forward (32x8x30x30, 16 filters)", ref, jit


def bench_conv_backward(repeats):
    rng = np.random.default_rng(3)
    xp = rng.normal(size=(32, 8, 30, 30))
    k = rng.normal(size=(16, 8, 3, 3))
    dz = rng.normal(size=(32, 16, 28, 28))
    jit = time_fn(kernels.conv2d_backward_padded_jit, xp, k, dz, 1, repeats=repeats)
    ref = time_fn(kernels.conv2d_backward_padded_numpy, xp, k, dz, 1, repeats=repeats)
    return "conv2d backward (same)", ref, jit


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    if not kernels.NUMBA_ENABLED:
        raise SystemExit("numba path disabled; unset INTFF_NO_NUMBA and install numba")

    benches = [bench_normalize, bench_adam, bench_conv_forward, bench_conv_backward]
    print(f"{'kernel':<42} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for bench in benches:
        name, ref, jit = bench(args.repeats)
        print(f"{name:<42} {ref * 1e3:>8.3f}ms {jit * 1e3:>8.3f}ms {ref / jit:>7.2f}x")


if __name__ == "__main__":
    main()
