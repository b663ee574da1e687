"""Compare the numba and numpy forms of the hot kernels.

Run ``python3 benchmarks/bench_kernels.py``. Compilation happens in a warm-up
call and is not timed.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from evcredit import kernels
from evcredit.game import shapley_weights
from evcredit.toc import TocConfig, generate_dataset, standard_pool


def _best(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=14, help="agents in the dense-table benchmarks")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        print("numba not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    n = args.n
    table = rng.uniform(-1, 1, 1 << n)
    table[0] = 0.0
    w = shapley_weights(n)
    size_ok = np.ones(n + 1, dtype=bool)

    ds = generate_dataset(standard_pool(), 220, TocConfig(), anonymize=True, seed=1)
    ptr, idx, sizes, scores = ds.obs.csr()
    aptr, aidx = ds.obs.agent_csr()
    k = 10
    u0 = rng.integers(0, k, size=len(ds.obs.agents))
    u0[:k] = np.arange(k)
    init = u0.copy()

    cases = [
        (f"shapley_table n={n}", lambda: kernels._shapley_nb(table, n, w), lambda: kernels._shapley_np(table, n, w)),
        (f"table_strata n={n}", lambda: kernels._table_strata_nb(table, n, size_ok), lambda: kernels._table_strata_np(table, n, size_ok)),
        ("group_strata 660 ids", lambda: kernels._group_strata_nb(ptr, idx, sizes, scores, len(ds.obs.agents), 4),
         lambda: kernels._group_strata_np(ptr, idx, sizes, scores, len(ds.obs.agents), 4)),
        ("cluster_objective k=10", lambda: kernels._objective_nb(u0, k, ptr, idx, scores, init, 0.0),
         lambda: kernels._objective_np(u0, k, ptr, idx, scores, init, 0.0)),
        ("climb k=10 (2 sweeps)", lambda: kernels._climb_nb(u0, k, ptr, idx, scores, aptr, aidx, init, 0.0, 2, 1e-12),
         lambda: kernels._climb_np(u0, k, ptr, idx, scores, aptr, aidx, init, 0.0, 2, 1e-12)),
    ]
    print(f"{'kernel':28s} {'numba [s]':>11s} {'numpy [s]':>11s} {'speedup':>8s}")
    for name, nb, npf in cases:
        t_nb, t_np = _best(nb, args.repeat), _best(npf, 1 if "climb" in name else args.repeat)
        print(f"{name:28s} {t_nb:11.5f} {t_np:11.5f} {t_np / t_nb:8.1f}")


if __name__ == "__main__":
    main()
