"""Time the compiled assignment kernel against the pure-Python fallback.

    python3 benchmarks/bench_lsa.py [--sizes 32 128 512] [--repeats 5]

Square sizes cover the attack's position matching (S x S); the wide 32 x 4S
case mirrors token matching against a candidate multiset with surplus copies.
Each kernel's total cost is checked against scipy's solver on every matrix.
"""

import argparse
import time

import numpy as np
from scipy.optimize import linear_sum_assignment as scipy_lsa

from fedbreach.solvers import linear_sum_assignment
from fedbreach.solvers.lsa import KERNELS


def best_time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[32, 128, 512])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    shapes = [(n, n) for n in args.sizes] + [(32, 4 * n) for n in args.sizes]
    backends = sorted(KERNELS)
    print(f"{'shape':>12} " + " ".join(f"{b + ' ms':>12}" for b in backends) + f" {'speedup':>9}")
    for shape in shapes:
        cost = rng.normal(size=shape)
        ref = cost[scipy_lsa(cost)].sum()
        times = {}
        for b in backends:
            asg = linear_sum_assignment(cost, backend=b)
            if abs(asg.total_cost - ref) > 1e-8 * max(1.0, abs(ref)):
                raise SystemExit(f"{b} kernel disagrees with scipy on {shape}")
            times[b] = best_time(lambda: linear_sum_assignment(cost, backend=b), args.repeats)
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{shape[0]:>5} x {shape[1]:<4} " + " ".join(f"{1e3 * times[b]:>12.2f}" for b in backends)
              + f" {speed:>8.1f}x")
    if "cython" not in KERNELS:
        print("compiled kernel not built; only the fallback was timed")


if __name__ == "__main__":
    main()
