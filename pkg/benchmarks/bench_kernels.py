"""Compiled vs pure-Python access kernel.

Times one pointer chase of N lines against a full-size L2 for each backend,
checks that both return identical results, and prints lines per second.

    python3 benchmarks/bench_kernels.py [--lines N] [--repeats R]
"""
import argparse
import time

import numpy as np

from gpuleak import _kernels


def make_state(num_sets: int, ways: int):
    return (np.full((num_sets, ways), -1, dtype=np.int64), np.zeros((num_sets, ways), dtype=np.int64),
            np.zeros(1, dtype=np.int64))


def run(fn, lines, num_sets, ways, policy):
    tags, stamps, clock = make_state(num_sets, ways)
    cyc = np.empty(len(lines), dtype=np.int64)
    cls = np.empty(len(lines), dtype=np.int8)
    means = np.array([270.0, 470.0, 650.0, 850.0])
    sigmas = np.array([12.0, 25.0, 20.0, 30.0])
    repl = np.array([1], dtype=np.uint64)
    rng = np.array([2], dtype=np.uint64)
    t = time.perf_counter()
    total = fn(tags, stamps, clock, lines, num_sets, policy, repl, True, means, sigmas, 8.0, rng, cyc, cls)
    return time.perf_counter() - t, (total, tags, stamps, cyc, cls)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lines", type=int, default=200_000)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--sets", type=int, default=2048)
    ap.add_argument("--ways", type=int, default=16)
    args = ap.parse_args()

    backends = [("python", _kernels.python_chase)]
    if _kernels.compiled_chase is not None:
        backends.append(("cython", _kernels.compiled_chase))
    else:
        print("compiled core not built; timing the Python fallback only")

    rng = np.random.default_rng(0)
    # mostly-hitting working set plus a streaming tail
    lines = np.concatenate([rng.integers(0, args.sets * args.ways // 2, args.lines // 2),
                            np.arange(args.lines - args.lines // 2) + 10**6]).astype(np.int64)
    print(f"{args.lines} accesses, {args.sets} sets x {args.ways} ways")
    for policy, name in ((0, "lru"), (1, "random")):
        best, outs = {}, {}
        for label, fn in backends:
            times = []
            for _ in range(args.repeats):
                dt, out = run(fn, lines, args.sets, args.ways, policy)
                times.append(dt)
            best[label] = min(times)
            outs[label] = out
        for label in best:
            print(f"  {name:6s} {label:6s} {best[label] * 1e3:9.1f} ms  {args.lines / best[label] / 1e6:7.2f} M lines/s")
        if len(outs) == 2:
            a, b = outs["python"], outs["cython"]
            same = a[0] == b[0] and all(np.array_equal(x, y) for x, y in zip(a[1:], b[1:]))
            print(f"  {name:6s} speedup {best['python'] / best['cython']:.0f}x, identical results: {same}")


if __name__ == "__main__":
    main()
