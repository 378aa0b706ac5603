#!/usr/bin/env python3
"""Benchmark the numba-compiled hot kernels against their pure-numpy
fallback paths (the ones selected by OSDFUSION_DISABLE_NUMBA=1).

Run:  python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from osdfusion._accel import NUMBA_ENABLED
from osdfusion.density import ClassDensityModel, DensityEvaluator, _gmm_loglik_numpy
from osdfusion.matching import _lapjv_kernel


def timeit(fn, *args, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def bench_assignment(rows):
    rng = np.random.default_rng(0)
    fallback = getattr(_lapjv_kernel, "py_func", _lapjv_kernel)
    print(f"\nassignment solver ({len(rows)} sizes, min over 5 runs)")
    print(f"{'n':>6} {'numba [ms]':>12} {'numpy [ms]':>12} {'speedup':>9}")
    for n in rows:
        cost = rng.uniform(0, 1, (n, n))
        _lapjv_kernel(cost)  # compile before timing
        t_jit = timeit(_lapjv_kernel, cost)
        t_py = timeit(fallback, cost, repeat=2 if n >= 100 else 5)
        ratio = t_py / t_jit if NUMBA_ENABLED else float("nan")
        print(f"{n:>6} {t_jit * 1e3:>12.2f} {t_py * 1e3:>12.2f} {ratio:>8.1f}x")


def bench_gmm(sizes):
    rng = np.random.default_rng(1)
    c, k, d = 5, 2, 16
    covs = []
    for _ in range(c * k):
        a = rng.standard_normal((d, d)) * 0.2
        covs.append(a @ a.T + np.eye(d))
    model = ClassDensityModel(
        class_names=tuple(f"c{i}" for i in range(c)),
        priors=np.full(c, 1.0 / c),
        weights=[np.full(k, 1.0 / k) for _ in range(c)],
        means=[rng.standard_normal((k, d)) for _ in range(c)],
        covariances=[np.stack(covs[i * k:(i + 1) * k]) for i in range(c)],
    )
    evaluator = DensityEvaluator(model)
    print(f"\nmixture log-likelihoods (C={c}, k={k}, D={d}, min over 5 runs)")
    print(f"{'N':>8} {'numba [ms]':>12} {'numpy [ms]':>12} {'speedup':>9}")
    for n in sizes:
        x = np.ascontiguousarray(rng.standard_normal((n, d)))
        evaluator.log_likelihoods(x[:16])  # compile before timing
        t_main = timeit(evaluator.log_likelihoods, x)
        t_np = timeit(
            _gmm_loglik_numpy,
            x, evaluator._chols, evaluator._means, evaluator._coefs,
            evaluator._starts, evaluator._log_priors,
        )
        ratio = t_np / t_main if NUMBA_ENABLED else float("nan")
        print(f"{n:>8} {t_main * 1e3:>12.2f} {t_np * 1e3:>12.2f} {ratio:>8.1f}x")


def main():
    backend = "numba" if NUMBA_ENABLED else "numpy fallback (numba disabled)"
    print(f"active backend: {backend}")
    bench_assignment((25, 50, 100, 200))
    bench_gmm((1000, 10000, 50000))
    if not NUMBA_ENABLED:
        print("\nnumba is disabled; both columns ran the fallback path")


if __name__ == "__main__":
    main()
