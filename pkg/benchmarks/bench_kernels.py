"""Compare the compiled and the numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--dim 64] [--points 2000] [--classes 10]
"""
import argparse
import importlib
import timeit

import numpy as np

from drmood import _pykernels


def spd(rng, n):
    a = rng.normal(size=(n, n))
    return a @ a.T + n * np.eye(n)


def cases(kern, dim, points, classes, rng):
    a = spd(rng, dim)
    lower = np.linalg.cholesky(a)
    x = rng.normal(size=(points, dim))
    mu = rng.normal(size=(classes, dim))
    out = np.zeros_like(a)
    return {
        "cholesky": lambda: kern.cholesky_into(a, out),
        "solve_lower": lambda: kern.solve_lower(lower, x),
        "solve_upper_t": lambda: kern.solve_upper_t(lower, x),
        "class_sq_dists": lambda: kern.class_sq_dists(x, mu, lower),
    }


def best_of(fn, repeat=5):
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--points", type=int, default=2000)
    ap.add_argument("--classes", type=int, default=10)
    args = ap.parse_args()

    backends = {"python": _pykernels}
    try:
        backends["cython"] = importlib.import_module("drmood._ckernels")
    except ImportError:
        print("compiled extension not built; timing the numpy backend only")

    timings = {}
    for name, kern in backends.items():
        rng = np.random.default_rng(0)
        for op, fn in cases(kern, args.dim, args.points, args.classes, rng).items():
            timings[(name, op)] = best_of(fn)

    print(f"dim={args.dim} points={args.points} classes={args.classes}")
    print(f"{'kernel':<16}{'python (ms)':>14}{'cython (ms)':>14}{'speedup':>10}")
    for op in ("cholesky", "solve_lower", "solve_upper_t", "class_sq_dists"):
        py = timings[("python", op)] * 1e3
        if ("cython", op) in timings:
            cy = timings[("cython", op)] * 1e3
            print(f"{op:<16}{py:>14.4f}{cy:>14.4f}{py / cy:>9.2f}x")
        else:
            print(f"{op:<16}{py:>14.4f}{'-':>14}{'-':>10}")


if __name__ == "__main__":
    main()
