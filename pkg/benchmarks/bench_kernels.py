"""Time the jitted kernels against their pure-Python twins.

Both variants wrap the same function objects (see flan._kernels), so this
is a direct measurement of what the numba compilation buys at each input
size.  Run with FLAN_NUMBA=0 to confirm the fallback timings match the
pure rows here.

    python3 benchmarks/bench_kernels.py [--repeats N] [--quick]
"""

import argparse
import time

import numpy as np

from flan._kernels import (
    _count_inversions_impl,
    _dag_path_stats_impl,
    count_inversions,
    dag_path_stats,
    numba_enabled,
)
from flan.rng import Rng


def best_of(fn, repeats, *args):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        result = fn(*args)
        times.append(time.perf_counter() - start)
    return min(times), result


def random_dag(rng, n):
    adj = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            adj[i, j] = rng.randint(2)
    # force reachability so the path statistics do real work
    for i in range(n - 1):
        adj[i, i + 1] = 1
    return adj


def report(name, size, pure_s, fast_s):
    speedup = pure_s / fast_s if fast_s > 0 else float("inf")
    print(f"{name:<18} {size:>9} {pure_s * 1e3:>12.3f} {fast_s * 1e3:>12.3f} "
          f"{speedup:>9.1f}x")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timed repetitions per case; best is reported")
    parser.add_argument("--quick", action="store_true",
                        help="smaller sizes for a fast smoke run")
    args = parser.parse_args()

    rng = Rng(7)
    inv_sizes = (1_000, 20_000) if args.quick else (1_000, 20_000, 200_000)
    dag_sizes = (16, 64) if args.quick else (16, 64, 256)

    print(f"numba enabled: {numba_enabled()}")
    print(f"{'kernel':<18} {'size':>9} {'pure ms':>12} {'jitted ms':>12} "
          f"{'speedup':>10}")

    for size in inv_sizes:
        values = np.array([rng.randint(1 << 30) for _ in range(size)],
                          dtype=np.int64)
        count_inversions(values[:64])  # compile outside the timer
        pure_s, want = best_of(_count_inversions_impl, args.repeats, values)
        fast_s, got = best_of(count_inversions, args.repeats, values)
        assert got == want, (got, want)
        report("count_inversions", size, pure_s, fast_s)

    for size in dag_sizes:
        adj = random_dag(rng, size)
        dag_path_stats(adj[:4, :4], 0, 3, 100)
        pure_s, want = best_of(
            _dag_path_stats_impl, args.repeats, adj, 0, size - 1, 1 << 16
        )
        fast_s, got = best_of(
            dag_path_stats, args.repeats, adj, 0, size - 1, 1 << 16
        )
        assert tuple(got) == tuple(want), (got, want)
        report("dag_path_stats", size, pure_s, fast_s)


if __name__ == "__main__":
    main()
