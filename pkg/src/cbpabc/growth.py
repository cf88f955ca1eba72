"""Grid fitting of density-dependent growth families.

Each grid point fixes a control family and shape value, reruns the
two-stage inference with the carrying capacity as the control parameter
(uniform prior on an interval), and scores the result by the fraction
of growth variance explained by one-step-ahead posterior-mean
forecasts.  The winner is the best-scoring family, with deterministic
tie-breaking.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import backend
from .errors import (
    BudgetExceeded,
    ConfigError,
    PriorMismatch,
    ZeroVariance,
)
from .laws import FAMILY_CODES, ObservedSample
from .refine import (
    DerivedPosteriors,
    derived_posteriors,
    regression_adjust,
    select_and_reject,
)
from .smc import GammaPrior, PriorSpec, SmcConfig, run_smc

_FORECAST_TAG = 404
_SHAPE_FAMILIES = ("theta-logistic", "hassell")

DEFAULT_THETA_GRID = (0.25, 0.5, 0.55, 1.0, 1.5, 2.0, 3.0)
DEFAULT_BETA_GRID = (0.05, 0.25, 0.5, 1.0, 1.25, 2.0)


def default_family_grid() -> Tuple[Tuple[str, Optional[float]], ...]:
    grid: List[Tuple[str, Optional[float]]] = [("verhulst", None)]
    grid += [("theta-logistic", t) for t in DEFAULT_THETA_GRID]
    grid += [("hassell", b) for b in DEFAULT_BETA_GRID]
    grid.append(("gompertz", None))
    return tuple(grid)


@dataclass(frozen=True)
class GrowthFitConfig:
    """Grid-search settings around a shared stage-1 configuration."""

    smc: SmcConfig
    k_prior: Tuple[float, float]
    kappa_max: int
    family_grid: Tuple[Tuple[str, Optional[float]], ...] = field(
        default_factory=default_family_grid)
    replicates: int = 200
    keep_fraction: float = 0.1
    min_group: int = 50

    def __post_init__(self) -> None:
        if len(self.family_grid) == 0:
            raise ConfigError("family grid must not be empty")
        lo, hi = self.k_prior
        if not 0.0 < lo < hi:
            raise ConfigError("capacity prior needs 0 < lo < hi")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        for fam, shape in self.family_grid:
            if fam not in FAMILY_CODES:
                raise ConfigError(f"unknown control family {fam!r}")
            if (fam in _SHAPE_FAMILIES) != (shape is not None):
                raise ConfigError(f"{fam} grid entry has a mismatched shape "
                                  "parameter")


@dataclass(frozen=True)
class FitScore:
    family: str
    shape: Optional[float]
    r2g: float
    expected_trajectory: np.ndarray    # forecast of Z_1..Z_n

    @property
    def n_shape(self) -> int:
        return 0 if self.shape is None else 1


def r2g(observed: ObservedSample, expected_trajectory: np.ndarray) -> float:
    """1 - SSE/SST of the forecasts over the observed generations."""
    expected_trajectory = np.asarray(expected_trajectory, dtype=np.float64)
    if expected_trajectory.shape[0] != observed.generations:
        raise ConfigError("expected trajectory must cover generations 1..n")
    idx = observed.observed_indices()
    idx = idx[idx >= 1]
    if idx.shape[0] + 1 < 3:
        raise ConfigError("need at least 3 observed points")
    z = observed.observed_values()[-idx.shape[0]:]
    zbar = z.mean()
    sst = float(np.sum((z - zbar) ** 2))
    if sst == 0.0:
        raise ZeroVariance("observed values are constant")
    sse = float(np.sum((z - expected_trajectory[idx - 1]) ** 2))
    return 1.0 - sse / sst


def forecast_trajectory(observed: ObservedSample, probs: np.ndarray,
                        capacity: float, family: str, shape: Optional[float],
                        replicates: int, seed: int,
                        size_cap: int = 10**12) -> np.ndarray:
    """Pointwise mean forecasts of Z_1..Z_n, each segment re-anchored at
    the most recent observed size (multi-step across gaps)."""
    k = backend.active()
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    k1 = probs.shape[0]
    m_off = float(probs @ np.arange(k1))
    ctl_kind = FAMILY_CODES[family]
    ctl_shape = 0.0 if shape is None else float(shape)
    out = np.empty(observed.generations)
    anchor_idx = 0
    anchor = observed.sizes[0]
    for i in range(1, observed.generations + 1):
        out[i - 1] = k.forecast_mean(
            seed, _FORECAST_TAG + i, anchor, i - anchor_idx, replicates,
            0, 0.0, 0.0, probs, k1, ctl_kind, capacity, ctl_shape, m_off,
            size_cap)
        if observed.sizes[i] is not None:
            anchor_idx, anchor = i, observed.sizes[i]
    return out


def fit_family(observed: ObservedSample, family: str, shape: Optional[float],
               cfg: GrowthFitConfig, seed: int,
               threads: int = 1) -> Tuple[DerivedPosteriors, FitScore]:
    """Two-stage inference for one grid point plus its fit score."""
    lo, hi = cfg.k_prior
    if observed.sizes[0] * 10 > lo:
        warnings.warn("the initial size is not far below the capacity "
                      "prior; the growth phase may be unidentifiable")
    prior = PriorSpec(kappa_max=cfg.kappa_max,
                      gamma_prior=GammaPrior("uniform", lo, hi))
    try:
        pops = run_smc(prior, observed, cfg.smc, seed,
                       control_family=family, control_shape=shape,
                       threads=threads)
    except BudgetExceeded as exc:
        raise PriorMismatch(
            f"{family} run exhausted its simulation budget; the capacity "
            "interval or kappa_max looks inconsistent with the data") from exc
    selected = select_and_reject(pops[-1], observed,
                                 keep_fraction=cfg.keep_fraction,
                                 min_group=cfg.min_group)
    adjusted = regression_adjust(selected, control_family=family,
                                 gamma_support=cfg.k_prior)
    post = derived_posteriors(adjusted, control_shape=shape)
    wn = adjusted.weight / adjusted.weight.sum()
    probs_mean = wn @ adjusted.probs
    probs_mean = probs_mean / probs_mean.sum()
    expected = forecast_trajectory(observed, probs_mean,
                                   post.marginals["gamma"].mean, family,
                                   shape, cfg.replicates, seed,
                                   size_cap=cfg.smc.size_cap)
    score = FitScore(family=family, shape=shape,
                     r2g=r2g(observed, expected),
                     expected_trajectory=expected)
    return post, score


_FAMILY_RANK = {"verhulst": 0, "gompertz": 1, "theta-logistic": 2,
                "hassell": 3}


def select_model(scores: Sequence[FitScore]) -> FitScore:
    """Best score wins; ties prefer fewer shape parameters, then the
    smaller shape value, then the fixed family order."""
    if len(scores) == 0:
        raise ConfigError("no fit scores to select from")
    return min(scores, key=lambda s: (-s.r2g, s.n_shape,
                                      0.0 if s.shape is None else s.shape,
                                      _FAMILY_RANK[s.family]))


def _derive_seed(seed: int, index: int) -> int:
    x = (seed ^ ((index + 1) * 0x9E3779B97F4A7C15)) & 0x7FFFFFFFFFFFFFFF
    return x or 1


def fit_grid(observed: ObservedSample, cfg: GrowthFitConfig, seed: int,
             threads: int = 1):
    """Run every grid point on its own derived stream; results keep the
    grid order, plus the selected winner."""
    results = []
    for i, (family, shape) in enumerate(cfg.family_grid):
        post, score = fit_family(observed, family, shape, cfg,
                                 _derive_seed(seed, i), threads=threads)
        results.append((post, score))
    best = select_model([score for _, score in results])
    return results, best
