"""Numba kernels vs their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--sets 20000] [--rounds 5]

Times NetVLAD pooling, greedy and optimal per-element matching and
descriptor-per-set scoring on random unit data, checks that both backends
agree, and prints median seconds per call with the speedup of numba.
"""

import argparse
import statistics
import time

import numpy as np

from setret import _kernels


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def median_time(fn, rounds):
    fn()  # compile / warm caches
    times = []
    for _ in range(rounds):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    p.add_argument("--sets", type=int, default=20000)
    p.add_argument("--elements", type=int, default=3, help="elements per set")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--K", type=int, default=8)
    p.add_argument("--queries", type=int, default=2)
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(args.seed)
    n, f, dim = args.sets, args.elements, args.dim
    x = unit_rows(rng, n * f, dim)
    x32 = x.astype(np.float32)
    off = np.arange(n + 1, dtype=np.int64) * f
    a, b, c = rng.normal(size=(args.K, dim)), rng.normal(size=args.K), unit_rows(rng, args.K, dim)
    q = unit_rows(rng, args.queries, dim)
    v32 = unit_rows(rng, n, dim).astype(np.float32)
    w, bias = 20.0, -8.0
    rows = np.arange(n, dtype=np.int64)

    cases = {
        "netvlad_pool": (lambda: _kernels.netvlad_pool_numba(x, off, a, b, c),
                         lambda: _kernels.netvlad_pool_numpy(x, off, a, b, c)),
        "greedy_scores": (lambda: _kernels.greedy_scores_numba(x32, off, q, w, bias, rows),
                          lambda: _kernels.greedy_scores_numpy(x32, off, q, w, bias, rows)),
        "optimal_scores": (lambda: _kernels.optimal_scores_numba(x32, off, q, w, bias, rows),
                           lambda: _kernels.optimal_scores_numpy(x32, off, q, w, bias, rows)),
        "set_scores": (lambda: _kernels._sigmoid(_kernels.set_logits_numba(v32, q, w, bias)).sum(axis=0),
                       lambda: _kernels.set_scores_numpy(v32, q, w, bias)),
    }
    print(f"{n} sets x {f} elements, dim {dim}, K {args.K}, Q {args.queries}, median of {args.rounds}")
    print(f"{'kernel':<16}{'numba s':>12}{'numpy s':>12}{'speedup':>9}{'max |diff|':>12}")
    for name, (jit, ref) in cases.items():
        diff = float(np.max(np.abs(np.asarray(jit()) - np.asarray(ref()))))
        tj, tn = median_time(jit, args.rounds), median_time(ref, args.rounds)
        print(f"{name:<16}{tj:>12.5f}{tn:>12.5f}{tn / tj:>9.1f}{diff:>12.1e}")


if __name__ == "__main__":
    main()
