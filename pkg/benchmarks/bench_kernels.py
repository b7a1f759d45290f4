"""Time the compiled and numpy message-passing kernels on grid-sized inputs.

    python3 benchmarks/bench_kernels.py [--nodes 4096] [--channels 32]
"""

import argparse
import timeit

import numpy as np

from igns import kernels
from igns.graphdata import build_grid_graph


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=4096, help="approximate node count (square grid)")
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    side = max(2, int(round(args.nodes ** 0.5)))
    g = build_grid_graph(side, side)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((g.n_nodes, args.channels))
    msg = rng.standard_normal((g.n_edges, args.channels))
    print(f"grid {side}x{side}: {g.n_nodes} nodes, {g.n_edges} edges, {args.channels} channels")

    impls = kernels.backends()
    ref = None
    for name, mod in impls.items():
        out = mod.scatter_add_rows(msg, g.dst, g.n_nodes)
        if ref is None:
            ref = out
        assert np.array_equal(out, ref), f"{name} disagrees with the reference backend"
        row = []
        for label, fn in (("scatter", lambda: mod.scatter_add_rows(msg, g.dst, g.n_nodes)),
                          ("gather", lambda: mod.gather_rows(x, g.src))):
            n = 20
            best = min(timeit.repeat(fn, number=n, repeat=args.repeat)) / n
            row.append(f"{label} {best * 1e6:9.1f} us")
        print(f"{name:>7}: " + "   ".join(row))
    if len(impls) == 1:
        print("compiled kernels not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
