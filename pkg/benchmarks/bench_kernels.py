"""Compiled vs pure-Python query kernels.

Times top-L selection over score vectors of growing size, then graph
construction and graph search on one candidate set. Both backends run the same
inputs, and the script checks that their outputs agree before reporting.

    python3 benchmarks/bench_kernels.py [--sizes 1000 10000 100000] [--graph-size 3000]
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from dndrec import _fallback, kernels
from dndrec.retrieval import _levels, augment


def best_of(fn, repeat: int) -> float:
    """Fastest of ``repeat`` calls, in seconds."""
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return min(out)


def bench_topl(backends, sizes, L, repeat, rng):
    rows = []
    for m in sizes:
        scores = np.ascontiguousarray(rng.normal(size=m))
        ref = None
        for name, mod in backends.items():
            ids, _ = mod.topl_select(scores, L)
            if ref is None:
                ref = ids
            assert np.array_equal(ids, ref), f"{name} disagrees at M={m}"
            t = best_of(lambda: mod.topl_select(scores, L), repeat)
            rows.append({"kernel": "topl_select", "M": m, "backend": name, "ms": 1e3 * t})
    return rows


def bench_graph(backends, m, dim, queries, rng):
    data, _ = augment(rng.normal(size=(m, dim)))
    levels = _levels(m, 16, 0)
    qs = [np.append(rng.normal(size=dim), 0.0) for _ in range(queries)]
    rows, results = [], {}
    for name, mod in backends.items():
        graph = mod.LayeredGraph(data, levels, 16)
        t0 = time.perf_counter()
        graph.build(200)
        build = time.perf_counter() - t0
        t0 = time.perf_counter()
        results[name] = [np.asarray(graph.search(q, 20, 256)[0]).tolist() for q in qs]
        search = (time.perf_counter() - t0) / queries
        rows.append({"kernel": "graph_build", "M": m, "backend": name, "ms": 1e3 * build})
        rows.append({"kernel": "graph_search", "M": m, "backend": name, "ms": 1e3 * search})
    first = next(iter(results.values()))
    assert all(r == first for r in results.values()), "graph backends disagree"
    return rows


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[1_000, 10_000, 100_000])
    ap.add_argument("--top", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--graph-size", type=int, default=3_000)
    ap.add_argument("--queries", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true", help="print rows as JSON lines")
    args = ap.parse_args(argv)

    backends = {"python": _fallback}
    if kernels.BACKEND == "compiled":
        backends["compiled"] = kernels
    else:
        print("compiled extension not available; timing the fallback only")
    rng = np.random.default_rng(args.seed)
    rows = bench_topl(backends, args.sizes, args.top, args.repeat, rng)
    rows += bench_graph(backends, args.graph_size, 16, args.queries, rng)

    if args.json:
        for row in rows:
            print(json.dumps(row))
        return
    print(f"{'kernel':<14}{'M':>9}{'python ms':>12}{'compiled ms':>13}{'speedup':>9}")
    keyed = {(r["kernel"], r["M"], r["backend"]): r["ms"] for r in rows}
    for kernel, m in dict.fromkeys((r["kernel"], r["M"]) for r in rows):
        py = keyed[(kernel, m, "python")]
        c = keyed.get((kernel, m, "compiled"))
        tail = f"{c:>13.3f}{py / c:>8.1f}x" if c else f"{'-':>13}{'-':>9}"
        print(f"{kernel:<14}{m:>9}{py:>12.3f}{tail}")


if __name__ == "__main__":
    main()
