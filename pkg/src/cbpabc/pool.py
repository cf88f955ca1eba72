"""Deterministic parallel simulation pools.

A pool run spawns candidate tasks 0, 1, 2, ... where task i is a pure
function of (master seed, stage tag, i).  The first `pool_size` tasks
that yield a comparable simulation (finite distance) form the pool, in
task order; the best `keep` of those by (distance, task index) are
returned and the realized tolerance is the largest retained distance.

Nothing in the result depends on scheduling: chunks may be computed on
any number of threads, but candidates are consumed strictly in task
order, so a run is bit-identical across thread counts and across
repeats.  Task generation stops once the pool is full; if the pool
cannot be filled within `attempt_factor * pool_size` tasks the run
aborts with BudgetExceeded, the signature of a prior that cannot reach
the data.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from .errors import BudgetExceeded, ConfigError

# Tasks per kernel invocation.  Large enough that the per-call overhead
# (buffer allocation, one python frame) is negligible against the
# simulation work, small enough that a nearly-full pool rarely
# overshoots by a visible amount.
CHUNK = 8192

ChunkFn = Callable[[int, int], Dict[str, np.ndarray]]
# signature: (first_task, n_tasks) -> field arrays of length n_tasks;
# must contain "dist" plus a uint8/bool "valid" column and may carry any
# other per-task columns (kappa, probs, gamma, sizes, phi, ...).


@dataclass(frozen=True)
class PoolResult:
    """Retained particles plus the realized tolerance."""

    fields: Dict[str, np.ndarray]
    task_index: np.ndarray
    epsilon: float
    tasks_spawned: int
    pool_size: int

    def __getitem__(self, key: str) -> np.ndarray:
        return self.fields[key]

    @property
    def size(self) -> int:
        return self.task_index.shape[0]


def run_pool(chunk_fn: ChunkFn, pool_size: int, keep: int,
             threads: int = 1, attempt_factor: int = 50,
             chunk: int = CHUNK) -> PoolResult:
    """Collect `pool_size` comparable candidates and keep the best `keep`."""
    if keep < 1 or pool_size < keep:
        raise ConfigError(f"need 1 <= keep <= pool_size, got keep={keep} "
                          f"pool_size={pool_size}")
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    max_tasks = attempt_factor * pool_size

    picked: list[Dict[str, np.ndarray]] = []
    picked_tasks: list[np.ndarray] = []
    collected = 0
    spawned = 0

    def consume(t0: int, out: Dict[str, np.ndarray]) -> bool:
        # runs on the submission thread only, in chunk order
        nonlocal collected
        valid = out["valid"].astype(bool) & np.isfinite(out["dist"])
        idx = np.flatnonzero(valid)
        room = pool_size - collected
        if idx.shape[0] > room:
            idx = idx[:room]
        if idx.shape[0]:
            picked.append({k: v[idx] for k, v in out.items() if k != "valid"})
            picked_tasks.append(idx.astype(np.int64) + t0)
            collected += idx.shape[0]
        return collected >= pool_size

    if threads == 1:
        while collected < pool_size:
            if spawned >= max_tasks:
                _budget(collected, pool_size, spawned)
            n = min(chunk, max_tasks - spawned)
            done = consume(spawned, chunk_fn(spawned, n))
            spawned += n
            if done:
                break
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            pending = {}
            next_submit = 0
            next_consume = 0
            while collected < pool_size:
                while (len(pending) < threads + 2 and next_submit < max_tasks):
                    n = min(chunk, max_tasks - next_submit)
                    pending[next_submit] = ex.submit(chunk_fn, next_submit, n)
                    next_submit += n
                if next_consume not in pending:
                    _budget(collected, pool_size, next_consume)
                fut = pending.pop(next_consume)
                t0 = next_consume
                n = min(chunk, max_tasks - t0)
                next_consume += n
                spawned = next_consume
                if consume(t0, fut.result()):
                    break
            for fut in pending.values():
                fut.cancel()

    fields = {k: np.concatenate([p[k] for p in picked])
              for k in picked[0]}
    tasks = np.concatenate(picked_tasks)
    order = np.lexsort((tasks, fields["dist"]))[:keep]
    order = order[np.argsort(tasks[order])]  # stable presentation: task order
    out = {k: np.ascontiguousarray(v[order]) for k, v in fields.items()}
    eps = float(out["dist"].max())
    return PoolResult(fields=out, task_index=tasks[order], epsilon=eps,
                      tasks_spawned=spawned, pool_size=pool_size)


def _budget(collected: int, pool_size: int, spawned: int) -> None:
    raise BudgetExceeded(
        f"pool filled {collected}/{pool_size} comparable simulations after "
        f"{spawned} tasks; the prior barely reaches the data, widen it or "
        f"raise attempt_factor")


def python_chunk(per_task: Callable[[int], Optional[Dict[str, float]]],
                 fields: Dict[str, np.dtype]) -> ChunkFn:
    """Adapter turning a per-task python callable into a ChunkFn.

    `per_task(i)` returns a field dict for task i, or None when the task
    is not comparable.  Used by tests and by toy oracles; production
    stages use the compiled chunk kernels directly.
    """

    def chunk_fn(t0: int, n: int) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {
            name: np.zeros(n, dtype=dt) for name, dt in fields.items()}
        out["dist"] = np.full(n, np.inf)
        out["valid"] = np.zeros(n, dtype=np.uint8)
        for j in range(n):
            row = per_task(t0 + j)
            if row is None:
                continue
            out["valid"][j] = 1
            for name, val in row.items():
                out[name][j] = val
        return out

    return chunk_fn
