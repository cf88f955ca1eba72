"""Command line entry point.

Subcommands: simulate, smc, refine, fit-growth, summarize.  Every run is
driven by a `key = value` config file; --seed, --threads and --out
override the corresponding keys without touching the file.  Environment
variables are never consulted for run settings.

Exit codes: 1 for configuration problems, 2 for data problems, 3 for an
exhausted simulation budget.  On failure a single machine-readable JSON
line {"error": ..., "message": ...} goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional, Sequence

from .archive import _atomic_write, load_archive, save_archive
from .config import RunConfig, load_config
from .datasets import format_observations, load_observations
from .errors import BudgetError, CbpError, ConfigError, DataError, ParseError
from .growth import fit_grid
from .laws import ObservedSample, simulate
from .refine import (
    DerivedPosteriors,
    derived_posteriors,
    regression_adjust,
    select_and_reject,
)
from .smc import kappa_posterior, run_smc


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors, not argparse's exit(2)."""

    def error(self, message: str):
        raise ConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="cbpabc",
                     description="Simulation and likelihood-free inference "
                                 "for controlled branching processes.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the seed key")
        p.add_argument("--threads", type=int, default=None,
                       help="override the threads key")
        p.add_argument("--out", default=None,
                       help="override the output directory")

    with_config(sub.add_parser("simulate",
                               help="simulate one trajectory to CSV"))
    with_config(sub.add_parser("smc",
                               help="stage 1: model choice over kappa"))
    refine = sub.add_parser("refine",
                            help="stage 2: posterior refinement of an archive")
    with_config(refine)
    refine.add_argument("--archive", required=True,
                        help="particle archive written by smc")
    with_config(sub.add_parser("fit-growth",
                               help="grid search over density-dependent "
                                    "control families"))
    summ = sub.add_parser("summarize", help="describe a file this tool wrote")
    summ.add_argument("path", help="file to summarize")
    return parser


def _prepare(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, threads=args.threads,
                              out=args.out)


def _out_dir(cfg: RunConfig) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def _observations(cfg: RunConfig) -> ObservedSample:
    path = cfg.values["observations"]
    if path is None:
        raise ConfigError("the observations key is required here")
    return load_observations(path)


def _run_id(cfg: RunConfig) -> str:
    base = os.path.basename(cfg.origin)
    stem = os.path.splitext(base)[0] if base and base != "<memory>" else "run"
    return f"{stem}-s{cfg.seed}"


def cmd_simulate(cfg: RunConfig) -> int:
    traj = simulate(cfg.offspring_law(), cfg.control_law(),
                    z0=cfg.values["z0"], generations=cfg.values["generations"],
                    seed=cfg.seed, size_cap=cfg.values["size_cap"])
    sample = ObservedSample(sizes=tuple(int(v) for v in traj.sizes),
                            last_progenitors=traj.last_progenitors)
    out = _out_dir(cfg)
    path = os.path.join(out, "trajectory.csv")
    _atomic_write(path, format_observations(sample))
    print(f"wrote {path}")
    print(f"final size = {int(traj.sizes[-1])}"
          + (f" (extinct at generation {traj.extinct_at})"
             if traj.extinct else ""))
    return 0


def cmd_smc(cfg: RunConfig) -> int:
    observed = _observations(cfg)
    populations = run_smc(cfg.prior_spec(), observed, cfg.smc_config(),
                          cfg.seed,
                          control_family=cfg.values["control_family"],
                          control_shape=cfg.values["control_shape"],
                          threads=cfg.threads)
    out = _out_dir(cfg)
    run_id = _run_id(cfg)
    for pset in populations:
        path = os.path.join(out, f"archive_t{pset.t}.csv")
        save_archive(pset, path, cfg.config_hash, observed, run_id)
        print(f"wrote {path} (epsilon = {pset.epsilon!r})")
    pmf, kappa_hat = kappa_posterior(populations[-1])
    lines = ["kappa,probability"]
    lines += [f"{k},{pmf[k]!r}" for k in range(2, pmf.shape[0])]
    pmf_path = os.path.join(out, "kappa_pmf.csv")
    _atomic_write(pmf_path, "\n".join(lines) + "\n")
    print(f"wrote {pmf_path}")
    print(f"kappa_hat = {kappa_hat}")
    return 0


def _write_posteriors(posts: DerivedPosteriors, out: str,
                      prefix: str = "") -> List[str]:
    written = []
    for name, post in posts.marginals.items():
        lines = [f"# bandwidth: {post.density.bandwidth!r}",
                 f"# mean: {post.mean!r}",
                 f"# hpd_level: {post.interval.level!r}",
                 f"# hpd_lo: {post.interval.lo!r}",
                 f"# hpd_hi: {post.interval.hi!r}",
                 f"# hpd_disconnected: {post.interval.disconnected}",
                 "grid,density"]
        lines += [f"{g!r},{d!r}"
                  for g, d in zip(post.density.grid, post.density.density)]
        path = os.path.join(out, f"{prefix}posterior_{name}.csv")
        _atomic_write(path, "\n".join(lines) + "\n")
        written.append(path)
    joint = posts.joint
    lines = [f"# bandwidth_x: {joint.bandwidth_x!r}",
             f"# bandwidth_y: {joint.bandwidth_y!r}",
             "m,gamma,density"]
    for i, gx in enumerate(joint.x_grid):
        lines += [f"{gx!r},{gy!r},{joint.density[i, j]!r}"
                  for j, gy in enumerate(joint.y_grid)]
    path = os.path.join(out, f"{prefix}joint_m_gamma.csv")
    _atomic_write(path, "\n".join(lines) + "\n")
    written.append(path)
    return written


def _summary_text(posts: DerivedPosteriors, extra: Sequence[str]) -> str:
    lines = list(extra)
    for name, post in posts.marginals.items():
        lines.append(f"{name}_mean = {post.mean!r}")
        lines.append(f"{name}_hpd_lo = {post.interval.lo!r}")
        lines.append(f"{name}_hpd_hi = {post.interval.hi!r}")
        if post.interval.disconnected:
            lines.append(f"{name}_hpd_disconnected = True")
    return "\n".join(lines) + "\n"


def cmd_refine(cfg: RunConfig, archive_path: str) -> int:
    observed = _observations(cfg)
    loaded = load_archive(archive_path, expect_config_hash=cfg.config_hash)
    selected = select_and_reject(loaded.particles, observed,
                                 kappa_hat=cfg.values["kappa_hat"],
                                 keep_fraction=cfg.values["keep_fraction"],
                                 min_group=cfg.values["min_group"])
    family = cfg.values["control_family"]
    adjusted = regression_adjust(
        selected, control_family=family,
        gamma_support=cfg.prior_spec().gamma_prior.support)
    posts = derived_posteriors(adjusted, level=cfg.values["hpd_level"],
                               grid_size=cfg.values["grid_size"],
                               joint_grid_size=cfg.values["joint_grid_size"],
                               control_shape=cfg.values["control_shape"])
    out = _out_dir(cfg)

    kap = adjusted.probs.shape[1] - 1
    cols = [f"p{j}" for j in range(kap + 1)] + ["gamma", "m"]
    if family == "binomial-xi":
        cols.append("tau_m")
    cols.append("weight")
    lines = [",".join(cols)]
    for i in range(adjusted.n):
        row = [repr(float(v)) for v in adjusted.probs[i]]
        row += [repr(float(adjusted.gamma[i])), repr(float(adjusted.m[i]))]
        if family == "binomial-xi":
            row.append(repr(float(adjusted.tau_m[i])))
        row.append(repr(float(adjusted.weight[i])))
        lines.append(",".join(row))
    adj_path = os.path.join(out, "adjusted.csv")
    _atomic_write(adj_path, "\n".join(lines) + "\n")
    print(f"wrote {adj_path}")

    for path in _write_posteriors(posts, out):
        print(f"wrote {path}")
    extra = [f"kappa_hat = {selected.kappa_hat}",
             f"epsilon2 = {selected.epsilon2!r}",
             f"retained = {adjusted.n}",
             f"rejected_rows = {adjusted.rejected_count}",
             f"fallback_no_adjustment = {adjusted.fallback_no_adjustment}",
             f"hpd_level = {cfg.values['hpd_level']!r}"]
    sum_path = os.path.join(out, "summary.txt")
    _atomic_write(sum_path, _summary_text(posts, extra))
    print(f"wrote {sum_path}")
    for name, post in posts.marginals.items():
        print(f"{name} mean = {post.mean!r}")
    return 0


def cmd_fit_growth(cfg: RunConfig) -> int:
    observed = _observations(cfg)
    gcfg = cfg.growth_config()
    results, best = fit_grid(observed, gcfg, cfg.seed, threads=cfg.threads)
    out = _out_dir(cfg)

    lines = ["family,shape,r2g"]
    best_posts = None
    for posts, score in results:
        shape = "" if score.shape is None else repr(score.shape)
        lines.append(f"{score.family},{shape},{score.r2g!r}")
        if score is best:
            best_posts = posts
    scores_path = os.path.join(out, "scores.csv")
    _atomic_write(scores_path, "\n".join(lines) + "\n")
    print(f"wrote {scores_path}")

    assert best_posts is not None
    for path in _write_posteriors(best_posts, out, prefix="best_"):
        print(f"wrote {path}")
    fc = ["generation,expected"]
    fc += [f"{i + 1},{v!r}" for i, v in enumerate(best.expected_trajectory)]
    fc_path = os.path.join(out, "best_forecast.csv")
    _atomic_write(fc_path, "\n".join(fc) + "\n")
    print(f"wrote {fc_path}")

    shape_note = "" if best.shape is None else f" (shape {best.shape!r})"
    extra = [f"family = {best.family}{shape_note}",
             f"r2g = {best.r2g!r}",
             f"hpd_level = {cfg.values['hpd_level']!r}"]
    sum_path = os.path.join(out, "best_summary.txt")
    _atomic_write(sum_path, _summary_text(best_posts, extra))
    print(f"wrote {sum_path}")
    print(f"selected {best.family}{shape_note}, r2g = {best.r2g!r}")
    return 0


def cmd_summarize(path: str) -> int:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            first = fh.readline().strip()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}")

    if first.startswith("# run_id:"):
        loaded = load_archive(path)
        pset = loaded.particles
        print(f"particle archive {loaded.run_id}, iteration {pset.t}")
        print(f"particles = {pset.n}, epsilon = {pset.epsilon!r}")
        print(f"config_hash = {loaded.config_hash}")
        pmf, kappa_hat = kappa_posterior(pset)
        for k in range(2, pmf.shape[0]):
            if pmf[k] > 0.0:
                print(f"kappa {k}: {pmf[k]:.4f}")
        print(f"kappa_hat = {kappa_hat}")
        return 0

    if first == "index,value":
        sample = load_observations(path)
        values = sample.observed_values()
        missing = sum(1 for v in sample.sizes if v is None)
        print(f"observations over generations 0..{sample.generations}")
        print(f"recorded = {values.shape[0]}, missing = {missing}")
        print(f"range = [{int(values.min())}, {int(values.max())}]")
        if sample.has_phi:
            print(f"phi = {sample.last_progenitors}")
        return 0

    with open(path, "r", encoding="utf-8") as fh:
        rows = [ln for ln in fh.read().splitlines() if ln.strip()]
    print(f"{first}")
    print(f"rows = {len(rows) - 1}")
    for line in rows[1:6]:
        print(line)
    if len(rows) > 6:
        print("...")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "summarize":
            return cmd_summarize(args.path)
        cfg = _prepare(args)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "smc":
            return cmd_smc(cfg)
        if args.command == "refine":
            return cmd_refine(cfg, args.archive)
        return cmd_fit_growth(cfg)
    except CbpError as exc:
        code = 1 if isinstance(exc, ConfigError) else \
            3 if isinstance(exc, BudgetError) else 2
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return code
    except OSError as exc:
        print(json.dumps({"error": "OSError", "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
