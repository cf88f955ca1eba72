"""Particle archives: one CSV per iteration plus a trajectory sidecar.

The main file starts with `# key: value` header lines (run id, iteration,
realized tolerance, configuration hash, shape fields), then a CSV table
with one row per particle: kappa, the offspring probabilities right-padded
with a -1 sentinel, gamma, weight, distance, the summary coordinates of
the retained trajectory, the original task index, and the row of the
trajectory sidecar holding the full path.  Floats are written with repr,
so a load reproduces the saved arrays bit for bit.

Writes go to a temporary file in the target directory and are renamed
into place, so a crash never leaves a half-written archive behind.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .distance import summary
from .errors import ArchiveMismatch, ParseError
from .laws import ObservedSample, Trajectory
from .smc import ParticleSet

_SENTINEL = -1.0


@dataclass(frozen=True)
class LoadedArchive:
    run_id: str
    config_hash: str
    particles: ParticleSet
    summaries: np.ndarray


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _sidecar_path(path: str) -> str:
    stem, ext = os.path.splitext(path)
    return f"{stem}.traj{ext or '.csv'}"


def summary_matrix(pset: ParticleSet, observed: ObservedSample) -> np.ndarray:
    """Summary coordinates of every retained trajectory, under the
    observation mask (and phi availability) of the real data."""
    dim = 2 if not observed.has_phi else 4
    out = np.empty((pset.n, dim))
    for i in range(pset.n):
        traj = Trajectory(sizes=pset.sizes[i].copy(),
                          last_progenitors=int(pset.phi[i]))
        out[i] = summary(traj, like=observed).as_vector()
    return out


def save_archive(pset: ParticleSet, path: str, config_hash: str,
                 observed: ObservedSample, run_id: str) -> None:
    kmax = pset.kappa_max
    summaries = summary_matrix(pset, observed)
    dim = summaries.shape[1]
    ngen = pset.sizes.shape[1] - 1

    mass = ",".join(repr(float(v)) for v in pset.mass())
    head = [
        f"# run_id: {run_id}",
        f"# iteration: {pset.t}",
        f"# epsilon: {pset.epsilon!r}",
        f"# config_hash: {config_hash}",
        f"# particles: {pset.n}",
        f"# kappa_max: {kmax}",
        f"# generations: {ngen}",
        f"# summary_dim: {dim}",
        f"# group_mass: {mass}",
    ]
    cols = (["kappa"] + [f"p{j}" for j in range(kmax + 1)]
            + ["gamma", "weight", "distance"]
            + [f"s{j}" for j in range(dim)] + ["task", "traj"])
    lines = head + [",".join(cols)]
    for i in range(pset.n):
        kap = int(pset.kappa[i])
        probs = [repr(float(pset.probs[i, j])) if j <= kap else repr(_SENTINEL)
                 for j in range(kmax + 1)]
        row = ([str(kap)] + probs
               + [repr(float(pset.gamma[i])), repr(float(pset.weight[i])),
                  repr(float(pset.distance[i]))]
               + [repr(float(v)) for v in summaries[i]]
               + [str(int(pset.task_index[i])), str(i)])
        lines.append(",".join(row))
    _atomic_write(path, "\n".join(lines) + "\n")

    tcols = ["row"] + [f"z{j}" for j in range(ngen + 1)] + ["phi"]
    tlines = [",".join(tcols)]
    for i in range(pset.n):
        tlines.append(",".join([str(i)]
                               + [str(int(v)) for v in pset.sizes[i]]
                               + [str(int(pset.phi[i]))]))
    _atomic_write(_sidecar_path(path), "\n".join(tlines) + "\n")


def _parse_header(lines: List[str], path: str) -> Tuple[Dict[str, str], int]:
    meta: Dict[str, str] = {}
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        body = lines[i][1:].strip()
        key, sep, val = body.partition(":")
        if not sep:
            raise ParseError(f"{path}:{i + 1}: malformed header line")
        meta[key.strip()] = val.strip()
        i += 1
    for need in ("run_id", "iteration", "epsilon", "config_hash",
                 "particles", "kappa_max", "generations", "summary_dim",
                 "group_mass"):
        if need not in meta:
            raise ParseError(f"{path}: header is missing {need!r}")
    return meta, i


def load_archive(path: str,
                 expect_config_hash: Optional[str] = None) -> LoadedArchive:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read archive {path}: {exc}")
    if not lines:
        raise ParseError(f"{path}: empty archive")
    meta, start = _parse_header(lines, path)

    if expect_config_hash is not None and meta["config_hash"] != expect_config_hash:
        raise ArchiveMismatch(
            f"{path}: archive was produced under config hash "
            f"{meta['config_hash'][:12]}..., the supplied configuration "
            f"hashes to {expect_config_hash[:12]}...; refusing to mix priors")

    n = int(meta["particles"])
    kmax = int(meta["kappa_max"])
    ngen = int(meta["generations"])
    dim = int(meta["summary_dim"])
    try:
        group_mass = np.array([float(v) for v in meta["group_mass"].split(",")],
                              dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"{path}: bad group_mass header: {exc}")
    if group_mass.shape[0] != kmax + 1:
        raise ParseError(f"{path}: group_mass has {group_mass.shape[0]} "
                         f"entries, expected {kmax + 1}")
    body = lines[start + 1:]
    if len(lines) <= start or len(body) != n:
        raise ParseError(f"{path}: expected {n} particle rows, "
                         f"found {max(len(body), 0)}")

    kappa = np.empty(n, dtype=np.int64)
    probs = np.zeros((n, kmax + 1))
    gamma = np.empty(n)
    weight = np.empty(n)
    distance = np.empty(n)
    summaries = np.empty((n, dim))
    task = np.empty(n, dtype=np.int64)
    traj_ref = np.empty(n, dtype=np.int64)
    width = 1 + (kmax + 1) + 3 + dim + 2
    for r, line in enumerate(body):
        parts = line.split(",")
        if len(parts) != width:
            raise ParseError(f"{path}:{start + 2 + r}: expected {width} "
                             f"columns, found {len(parts)}")
        try:
            kappa[r] = int(parts[0])
            row_p = [float(v) for v in parts[1:kmax + 2]]
            gamma[r] = float(parts[kmax + 2])
            weight[r] = float(parts[kmax + 3])
            distance[r] = float(parts[kmax + 4])
            summaries[r] = [float(v) for v in parts[kmax + 5:kmax + 5 + dim]]
            task[r] = int(parts[-2])
            traj_ref[r] = int(parts[-1])
        except ValueError as exc:
            raise ParseError(f"{path}:{start + 2 + r}: {exc}")
        kap = kappa[r]
        probs[r, :kap + 1] = row_p[:kap + 1]
        if any(v != _SENTINEL for v in row_p[kap + 1:]):
            raise ParseError(f"{path}:{start + 2 + r}: probabilities beyond "
                             f"kappa={kap} must carry the {_SENTINEL} sentinel")

    spath = _sidecar_path(path)
    try:
        with open(spath, "r", encoding="utf-8") as fh:
            tlines = fh.read().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read trajectory sidecar {spath}: {exc}")
    if len(tlines) != n + 1:
        raise ParseError(f"{spath}: expected {n} trajectory rows, "
                         f"found {len(tlines) - 1}")
    sizes = np.empty((n, ngen + 1), dtype=np.int64)
    phi = np.empty(n, dtype=np.int64)
    for r, line in enumerate(tlines[1:]):
        parts = line.split(",")
        if len(parts) != ngen + 3:
            raise ParseError(f"{spath}:{r + 2}: expected {ngen + 3} columns")
        try:
            row = int(parts[0])
            sizes[r] = [int(v) for v in parts[1:ngen + 2]]
            phi[r] = int(parts[-1])
        except ValueError as exc:
            raise ParseError(f"{spath}:{r + 2}: {exc}")
        if row != r:
            raise ParseError(f"{spath}:{r + 2}: rows must be stored in order")
    if np.any(traj_ref != np.arange(n)):
        raise ParseError(f"{path}: trajectory references must be the row order")

    pset = ParticleSet(t=int(meta["iteration"]), epsilon=float(meta["epsilon"]),
                       kappa=kappa, probs=probs, gamma=gamma, weight=weight,
                       distance=distance, sizes=sizes, phi=phi,
                       task_index=task, group_mass=group_mass)
    return LoadedArchive(run_id=meta["run_id"], config_hash=meta["config_hash"],
                         particles=pset, summaries=summaries)
