"""Timing harness for the two kernel lanes.

Runs the dominant hot paths through the compiled lane and the pure-python
lane and prints median wall times with the speedup.  The lanes are
bit-identical (tests/test_backend.py); this script asserts agreement on a
small sample as a sanity check before timing.

Usage: python benchmarks/backend_bench.py [--tasks 8192] [--repeats 5]
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from cbpabc import backend
from cbpabc.datasets import load_fixture
from cbpabc.laws import Geometric, offspring_code
from cbpabc.smc import GammaPrior, PriorSpec, _chunk_buffers, _observed_encoding


def bench_prior_chunk(lane_name: str, tasks: int, repeats: int):
    """Stage-1 pool chunk: prior draw + simulation + raw distance."""
    k = backend.lane(lane_name)
    observed = load_fixture("example2")
    prior = PriorSpec(kappa_max=15, gamma_prior=GammaPrior("beta", 1.0, 1.0))
    obs_idx, has_phi, obs_vec = _observed_encoding(observed)
    alpha_mat = prior.alpha_matrix()
    gp_kind, gp_a, gp_b = prior.gamma_prior.kernel_code()
    ngen = observed.generations

    def run(t0: int):
        out = _chunk_buffers(tasks, prior.kappa_max + 1, ngen)
        k.chunk_iter1(9000, 1, t0, tasks, prior.kappa_max, alpha_mat,
                      gp_kind, gp_a, gp_b, 0, 0.0,
                      observed.sizes[0], ngen, 10**12,
                      obs_idx, has_phi, obs_vec,
                      out["kappa"], out["probs"], out["gamma"], out["dist"],
                      out["sizes"], out["phi"], out["valid"])
        return out

    run(0)    # warmup (compiles the numba lane on first use)
    times = []
    for r in range(repeats):
        start = time.perf_counter()
        out = run((r + 1) * tasks)
        times.append(time.perf_counter() - start)
    return statistics.median(times), out


def bench_trajectories(lane_name: str, tasks: int, repeats: int):
    """Raw trajectory simulation at the bundled example's scale."""
    k = backend.lane(lane_name)
    off_kind, par1, par2, probs, k1 = offspring_code(Geometric(q=0.4))
    m_off = Geometric(q=0.4).mean()
    sizes = np.empty(31, dtype=np.int64)
    st = np.empty(4, dtype=np.uint64)

    def run(base: int) -> int:
        acc = 0
        for task in range(tasks):
            k.stream_init(4242, 7, base + task, st)
            phi, _ = k.simulate_general(st, off_kind, par1, par2, probs, k1,
                                        0, 0.75, 0.0, m_off, 1, 30, 10**12,
                                        sizes)
            acc += phi + int(sizes[-1])
        return acc

    run(0)
    times = []
    for r in range(repeats):
        start = time.perf_counter()
        acc = run((r + 1) * tasks)
        times.append(time.perf_counter() - start)
    return statistics.median(times), acc


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tasks", type=int, default=8192)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if not backend.numba_available():
        raise SystemExit("numba is not importable; nothing to compare")

    rows = []
    for label, bench in (("prior pool chunk", bench_prior_chunk),
                         ("trajectory simulation", bench_trajectories)):
        tn, out_n = bench("numba", args.tasks, args.repeats)
        tp, out_p = bench("python", args.tasks, args.repeats)
        if label == "prior pool chunk":
            assert np.array_equal(out_n["dist"], out_p["dist"]), \
                "lanes disagree"
        else:
            assert out_n == out_p, "lanes disagree"
        rows.append((label, tn, tp))

    print(f"{args.tasks} tasks per call, median of {args.repeats} repeats\n")
    print(f"{'kernel':<26}{'numba':>12}{'python':>12}{'speedup':>10}")
    for label, tn, tp in rows:
        print(f"{label:<26}{tn:>11.4f}s{tp:>11.4f}s{tp / tn:>9.1f}x")


if __name__ == "__main__":
    main()
