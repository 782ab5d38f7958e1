"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--n 20000] [--K 10 100] [--repeat 5]
"""

import argparse
import math
import timeit

import numpy as np

from ec3 import kernels


def bench(fn, repeat):
    fn()  # warm-up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20_000, help="rows for the score kernel")
    ap.add_argument("--K", type=int, nargs="+", default=[10, 100])
    ap.add_argument("--wsc-n", type=int, default=3000)
    ap.add_argument("--directions", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    if kernels.BACKEND != "cython":
        print("compiled extension not available; only the fallback can be timed")
    rng = np.random.default_rng(0)
    rows = []
    for K in args.K:
        P = rng.dirichlet(np.full(K, 0.3), size=args.n)
        times = {}
        for label, flag in (("compiled", True), ("numpy", False)):
            if flag and kernels.BACKEND != "cython":
                continue
            times[label] = bench(lambda: kernels.aps_scores_batch(P, use_compiled=flag), args.repeat)
        if len(times) == 2:
            same = np.array_equal(kernels.aps_scores_batch(P, True), kernels.aps_scores_batch(P, False))
        else:
            same = None
        rows.append((f"aps_scores n={args.n} K={K}", times, same))

    hits = (rng.random((args.directions, args.wsc_n)) < 0.9).astype(np.uint8)
    m = math.ceil(0.25 * args.wsc_n)
    times = {}
    for label, flag in (("compiled", True), ("numpy", False)):
        if flag and kernels.BACKEND != "cython":
            continue
        times[label] = bench(lambda: kernels.wsc_min_windows(hits, m, use_compiled=flag), args.repeat)
    same = None
    if len(times) == 2:
        a, b = kernels.wsc_min_windows(hits, m, True), kernels.wsc_min_windows(hits, m, False)
        same = np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    rows.append((f"wsc_windows d={args.directions} n={args.wsc_n}", times, same))

    print(f"{'kernel':<34}{'compiled s':>12}{'numpy s':>12}{'speedup':>10}  identical")
    for name, t, same in rows:
        c, p = t.get("compiled", math.nan), t["numpy"]
        print(f"{name:<34}{c:>12.4f}{p:>12.4f}{p / c:>10.2f}  {same}")


if __name__ == "__main__":
    main()
