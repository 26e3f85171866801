"""Time the numba kernels against their numpy/python counterparts.

    python benchmarks/bench_kernels.py [--repeat 20]

The numba column is only meaningful when numba is active (the default);
with FEDTRAJREC_NUMBA=0 both columns run the same uncompiled code.
"""
import argparse
import timeit

import numpy as np

from fedtrajrec import kernels
from fedtrajrec._accel import USE_NUMBA
from fedtrajrec.roadnet import generate_grid_network


def cases(rng):
    net = generate_grid_network(30, 30, 100.0)
    px, py = rng.uniform(0, 2900, 400), rng.uniform(0, 2900, 400)
    seg = (net.ax, net.ay, net.bx, net.by)
    csr = (net._indptr, net._csr_head, net._csr_w, net._csr_edge, np.int64(0))
    emission = np.log(rng.random((200, 40)))
    transition = np.log(rng.random((199, 40, 40)))
    return {
        "segment_distances (400 pts x %d segs)" % net.n_edges:
            (kernels.segment_distances_numpy, kernels.segment_distances_numba, (px, py) + seg),
        "dijkstra (%d nodes)" % net.n_nodes:
            (kernels.dijkstra_python, kernels.dijkstra_numba, csr),
        "viterbi (200 steps x 40 states)":
            (kernels.viterbi_numpy, kernels.viterbi_numba, (emission, transition)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"numba active: {USE_NUMBA}")
    print(f"{'kernel':<42}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, (slow, fast, inputs) in cases(rng).items():
        fast(*inputs)  # compile outside the timed region
        t_slow = min(timeit.repeat(lambda: slow(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_fast = min(timeit.repeat(lambda: fast(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<42}{t_slow:>10.3f}{t_fast:>10.3f}{t_slow / t_fast:>8.1f}x")


if __name__ == "__main__":
    main()
