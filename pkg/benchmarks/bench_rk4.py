"""Compare the compiled and NumPy RK4 kernels (forward rollout plus VJP).

Usage::

    python benchmarks/bench_rk4.py [--repeats 20] [--sizes 8,16,32] [--steps 59]

Prints one row per latent size with the median time per call of each backend,
the speedup, and the largest absolute difference between their outputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from dyncausal import kernels


def _inputs(m: int, q: int, steps: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    h0 = rng.normal(size=m)
    P1 = rng.normal(scale=0.3, size=(m + 1, q))
    p1 = rng.normal(scale=0.1, size=q)
    P2 = rng.normal(scale=0.3 / steps, size=(q, m))
    p2 = rng.normal(scale=0.1 / steps, size=m)
    dH = rng.normal(size=(steps + 1, m))
    return h0, P1, p1, P2, p2, dH


def _run(backend, args, steps):
    h0, P1, p1, P2, p2, dH = args
    H, Y, A = backend.rk4_rollout(h0, P1, p1, P2, p2, steps, float(steps))
    grads = backend.rk4_rollout_vjp(dH, P1, p1, P2, p2, Y, A, float(steps))
    return H, grads


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--sizes", default="8,16,32")
    ap.add_argument("--steps", type=int, default=59)
    args = ap.parse_args(argv)

    if kernels.compiled_backend is None:
        print("compiled backend unavailable; timing the NumPy kernel only")
    print(f"{'m':>4} {'numpy ms':>10} {'compiled ms':>12} {'speedup':>8} {'max |diff|':>11}")
    for m in (int(s) for s in args.sizes.split(",")):
        inp = _inputs(m, m, args.steps)
        t_py = _median_time(lambda: _run(kernels.python_backend, inp, args.steps), args.repeats)
        if kernels.compiled_backend is None:
            print(f"{m:>4} {t_py * 1e3:>10.3f} {'-':>12} {'-':>8} {'-':>11}")
            continue
        t_c = _median_time(lambda: _run(kernels.compiled_backend, inp, args.steps), args.repeats)
        H1, g1 = _run(kernels.python_backend, inp, args.steps)
        H2, g2 = _run(kernels.compiled_backend, inp, args.steps)
        diff = max(np.max(np.abs(H1 - H2)), *(np.max(np.abs(a - b)) for a, b in zip(g1, g2)))
        print(f"{m:>4} {t_py * 1e3:>10.3f} {t_c * 1e3:>12.3f} {t_py / t_c:>8.1f} {diff:>11.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
