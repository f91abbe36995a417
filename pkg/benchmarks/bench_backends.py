"""Time the compiled kernels against the NumPy fallback.

Run as a script; prints one row per kernel with the median wall time of
each backend and the speed ratio.  Sizes roughly match one training step
on the default synthetic corpus.

    python3 benchmarks/bench_backends.py [--repeats 7]
"""

import argparse
import timeit

import numpy as np

from groupvec.backends import pykernels

try:
    from groupvec.backends import ckernels
except ImportError:
    ckernels = None


def make_cases(rng):
    x_small = rng.normal(size=(120, 32))
    x_batch = rng.normal(size=(500, 64))
    cents = rng.normal(size=(100, 64))
    e = pykernels.pairwise_dist(x_batch)
    g = rng.normal(size=e.shape)
    vals = rng.normal(size=2000)
    return [
        ("cross_sqdist 500x64 vs 100", lambda k: k.cross_sqdist(x_batch, cents)),
        ("pairwise_dist 120x32", lambda k: k.pairwise_dist(x_small)),
        ("pairwise_dist 500x64", lambda k: k.pairwise_dist(x_batch)),
        ("pairwise_dist_grad 500x64", lambda k: k.pairwise_dist_grad(x_batch, e, g)),
        ("assign_nearest 500 to 100", lambda k: k.assign_nearest(x_batch, cents)),
        ("topk_smallest 2000 k=5", lambda k: k.topk_smallest(vals, 5)),
    ]


def median_time(fn, repeats):
    times = timeit.repeat(fn, number=1, repeat=repeats)
    return sorted(times)[len(times) // 2]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    cases = make_cases(rng)
    print(f"{'kernel':30s} {'numpy':>10s} {'compiled':>10s} {'ratio':>7s}")
    for name, call in cases:
        t_py = median_time(lambda: call(pykernels), args.repeats)
        if ckernels is None:
            print(f"{name:30s} {t_py * 1e3:9.3f}ms {'n/a':>10s} {'':>7s}")
            continue
        t_c = median_time(lambda: call(ckernels), args.repeats)
        ratio = t_py / t_c if t_c > 0 else float("inf")
        print(f"{name:30s} {t_py * 1e3:9.3f}ms {t_c * 1e3:9.3f}ms {ratio:6.2f}x")
    if ckernels is None:
        print("compiled backend unavailable; rebuild with: pip install -e . --no-build-isolation")


if __name__ == "__main__":
    main()
