"""Compare the compiled vote kernel with the pure-Python fallback.

    python3 benchmarks/bench_vote.py --nodes 15 --objects 500000
"""

from __future__ import annotations

import argparse
import random
import timeit

from rpquorum import _vote_fallback

try:
    from rpquorum import _vote_kernel
except ImportError:
    _vote_kernel = None


def make_sets(n: int, objects: int, keep: float, seed: int) -> list[frozenset]:
    rng = random.Random(seed)
    universe = [f'{{"asn":"AS{i % 65000}","prefix":"10.{i % 256}.0.0/16","n":{i}}}' for i in range(objects)]
    return [frozenset(x for x in universe if rng.random() < keep) for _ in range(n)]


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--nodes", type=int, default=15)
    p.add_argument("--objects", type=int, default=200_000)
    p.add_argument("--keep", type=float, default=0.97, help="fraction of objects each node holds")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    sets = make_sets(args.nodes, args.objects, args.keep, args.seed)
    threshold = args.nodes // 2 + 1
    backends = [("python", _vote_fallback.count_votes)]
    if _vote_kernel is not None:
        backends.append(("cython", _vote_kernel.count_votes))
    else:
        print("compiled kernel not built; only the fallback is timed")

    results = {}
    for name, fn in backends:
        best = min(timeit.repeat(lambda: fn(sets, threshold), number=1, repeat=args.repeat))
        results[name] = (best, fn(sets, threshold))
        print(f"{name:>7}: {best * 1e3:9.1f} ms  ({len(results[name][1])} objects in master)")
    if len(results) == 2:
        assert results["python"][1] == results["cython"][1], "backends disagree"
        print(f"speedup: {results['python'][0] / results['cython'][0]:.2f}x")


if __name__ == "__main__":
    main()
