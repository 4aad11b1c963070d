"""Time the compiled and pure-Python kernels on the standard synthetic graph.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 4000]

Both backends consume the same uniforms, so the script also checks that
their outputs agree before reporting timings.
"""

import argparse
import time

import numpy as np

from mgfn import kernels
from mgfn.experiments import standard


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=4000)
    ap.add_argument("--fanout", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    g = standard(1).graph
    rng = np.random.default_rng(args.seed)
    impls = kernels.implementations()
    print(f"graph: {g.n_nodes} nodes, {g.n_edges()} edges; backends: {', '.join(impls)}")

    adj = g.in_adj[0]
    weights = g.normalized_in_weights(0)
    nodes = np.unique(rng.integers(g.n_nodes, size=args.batch))
    n_unif = int((adj.indptr[nodes + 1] - adj.indptr[nodes]).sum())
    uniforms = rng.random(n_unif)

    union = g.union_out
    heads = rng.integers(g.n_nodes, size=args.batch * 5)
    cands = rng.integers(g.n_nodes, size=args.batch * 5)

    results = {}
    for name, mod in impls.items():
        def sample(mod=mod):
            return kernels.sample_neighbors(adj.indptr, weights, nodes, args.fanout, uniforms, impl=mod)

        def member(mod=mod):
            return kernels.edges_exist(union.indptr, union.indices, heads, cands, impl=mod)

        results[name] = (sample(), member())
        ts, tm = best_of(sample, args.repeat), best_of(member, args.repeat)
        print(f"{name:>8}  sample_neighbors {ts * 1e3:8.3f} ms   edges_exist {tm * 1e3:8.3f} ms")

    if len(results) == 2:
        (a_s, a_m), (b_s, b_m) = results.values()
        same = all(np.array_equal(x, y) for x, y in zip(a_s, b_s)) and np.array_equal(a_m, b_m)
        print("outputs identical:", same)


if __name__ == "__main__":
    main()
