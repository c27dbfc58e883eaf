#!/usr/bin/env python3
"""Time the compiled scan kernel against the pure-numpy fallback.

The alignment search reduces to masked sliding-window sums; this script
runs the same workload through both backends and prints a comparison
table.  Representative sizes: a mid-size patch query against a full map
at stride 1 and 2, with and without a rotation validity mask.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from mcncc._kernels import HAVE_NUMBA, scan_sums
from mcncc.tensor import FeatureMap, rotate


def workload(seed, c, target_size, query_size, rotated):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((c, target_size, target_size))
    q = rng.standard_normal((c, query_size, query_size))
    if rotated:
        fm = rotate(FeatureMap(q), 12.0)
        q = np.asarray(fm.values)
        qmask = fm.valid_mask()
    else:
        qmask = np.ones((query_size, query_size), dtype=bool)
    tmask = np.ones((target_size, target_size), dtype=bool)
    return q, qmask, t, tmask


def time_backend(backend, args, stride, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        scan_sums(*args, stride=stride, backend=backend)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=3)
    opts = parser.parse_args()

    cases = [
        ("C=8  96->40  s1", dict(c=8, target_size=96, query_size=40, rotated=False), 1),
        ("C=8  96->40  s2", dict(c=8, target_size=96, query_size=40, rotated=False), 2),
        ("C=8  96->40  s2 rot", dict(c=8, target_size=96, query_size=40, rotated=True), 2),
        ("C=32 64->24  s1", dict(c=32, target_size=64, query_size=24, rotated=False), 1),
    ]

    backends = ["numpy"] + (["numba"] if HAVE_NUMBA else [])
    if HAVE_NUMBA:
        # Warm up the JIT so compile time stays out of the table.
        args = workload(0, 2, 32, 12, False)
        scan_sums(*args, stride=1, backend="numba")
    else:
        print("numba unavailable; timing the numpy fallback only")

    print(f"{'case':22s} " + " ".join(f"{b:>12s}" for b in backends) + "  speedup")
    for label, spec, stride in cases:
        args = workload(1, **spec)
        times = {b: time_backend(b, args, stride, opts.repeats) for b in backends}
        row = f"{label:22s} " + " ".join(f"{times[b] * 1e3:10.1f}ms" for b in backends)
        if "numba" in times:
            row += f"  {times['numpy'] / times['numba']:6.1f}x"
        print(row)

        results = [scan_sums(*args, stride=stride, backend=b) for b in backends]
        for a, b in zip(results[0], results[-1]):
            np.testing.assert_allclose(a, b, atol=1e-9)


if __name__ == "__main__":
    main()
