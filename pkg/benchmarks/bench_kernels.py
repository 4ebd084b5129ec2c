"""Time the numba and numpy versions of each hot kernel on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1]
"""
import argparse
import timeit

import numpy as np

from combofl import _kernels as K


def maxmin_case(rng, scale):
    # one round of segment pulls: n=30 workers, S=10, R=2
    n, m = 30, 600 * scale
    src = rng.integers(0, n, m)
    dst = (src + rng.integers(1, n, m)) % n
    cap = np.full(n, 100e6)
    return (src, dst, cap, cap, 10e6)


def aggregate_case(rng, scale):
    k, dim, S, P = 30, 20_000 * scale, 10, 3
    models = rng.standard_normal((k, dim))
    weights = rng.integers(1, 100, k).astype(float)
    bounds = np.linspace(0, dim, S + 1).astype(np.int64)
    providers = np.stack([
        np.stack([np.sort(rng.choice(k, P, replace=False)) for _ in range(S)]) for _ in range(k)
    ]).astype(np.int64)
    return (models, weights, providers, bounds)


def descent_case(rng, scale):
    d = 20 * scale
    q = rng.standard_normal((d, d))
    A = q @ q.T / d + 0.1 * np.eye(d)
    return (A, rng.standard_normal(d), rng.standard_normal(d), 0.01, 40)


CASES = {
    "maxmin_rates": maxmin_case,
    "segment_aggregate": aggregate_case,
    "quadratic_descent": descent_case,
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    ap.add_argument("--scale", type=int, default=1, help="multiply problem sizes")
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, make in CASES.items():
        case = make(rng, args.scale)
        fast = getattr(K, f"{name}_numba")
        slow = getattr(K, f"{name}_numpy")
        fast(*case)  # compile outside the timed region
        t_fast = min(timeit.repeat(lambda: fast(*case), number=args.number, repeat=args.repeat))
        t_slow = min(timeit.repeat(lambda: slow(*case), number=args.number, repeat=args.repeat))
        ms = 1e3 / args.number
        print(f"{name:<20}{t_slow * ms:>12.3f}{t_fast * ms:>12.3f}{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()
