"""Stage 2: refinement of the winning model's parameter posterior.

The particles that survived stage 1 under the selected offspring bound
are rescreened by the relative-ratio distance on summary statistics,
corrected by a local linear regression of each parameter on the summary
discrepancies, and turned into weighted kernel density estimates with
highest-posterior-density intervals.  Derived quantities (offspring
mean, mean growth rate, equilibrium size for density-dependent
controls) are mapped row by row before smoothing.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from .distance import rho, summary
from .errors import (
    ConfigError,
    DegenerateSample,
    DomainError,
    InsufficientParticles,
    RegressionFallbackWarning,
    ValidationError,
)
from .laws import DensityControl, ObservedSample
from .smc import Particle, ParticleSet, kappa_posterior

_MIN_GROUP = 50


@dataclass(frozen=True)
class SelectedSet:
    """Regression input: the kappa-conditioned, rescreened particles."""

    kappa_hat: int
    particles: Tuple[Particle, ...]
    summaries: np.ndarray          # (n, dim) summary vectors
    rho: np.ndarray                # summary distance to the observed vector
    epsilon2: float                # max retained distance (stage-2 tolerance)
    observed_summary: np.ndarray
    task_index: np.ndarray

    def __len__(self) -> int:
        return len(self.particles)

    def __iter__(self) -> Iterator[Particle]:
        return iter(self.particles)

    def __getitem__(self, i: int) -> Particle:
        return self.particles[i]

    @property
    def probs(self) -> np.ndarray:
        return np.array([p.probs for p in self.particles])

    @property
    def gamma(self) -> np.ndarray:
        return np.array([p.gamma for p in self.particles])


@dataclass(frozen=True)
class AdjustedSample:
    """Regression-adjusted rows; negative-coordinate rows are removed
    rather than transformed, and the survivors' pmf rows are pushed back
    onto the simplex (an extrapolation recorded by `renormalized`)."""

    probs: np.ndarray
    gamma: np.ndarray
    m: np.ndarray
    tau_m: np.ndarray
    weight: np.ndarray
    rejected_count: int
    control_family: str
    fallback_no_adjustment: bool = False
    renormalized: bool = False

    def __post_init__(self) -> None:
        if np.any(self.weight < 0.0):
            raise ValidationError("adjusted weights must be >= 0")

    @property
    def n(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class DensityEstimate:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))

    def mean(self) -> float:
        return float(np.trapezoid(self.grid * self.density, self.grid))


@dataclass(frozen=True)
class DensityGrid:
    """Product-kernel density on a rectangular grid, for contour plots."""

    x_grid: np.ndarray
    y_grid: np.ndarray
    density: np.ndarray            # shape (len(x_grid), len(y_grid))
    bandwidth_x: float
    bandwidth_y: float


@dataclass(frozen=True)
class HpdInterval:
    level: float
    lo: float
    hi: float
    disconnected: bool = False     # super-level set had gaps on the grid

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValidationError("HPD interval needs lo < hi")


@dataclass(frozen=True)
class PosteriorSummary:
    name: str
    mean: float
    density: DensityEstimate
    interval: HpdInterval


@dataclass(frozen=True)
class DerivedPosteriors:
    marginals: Dict[str, PosteriorSummary]
    joint: DensityGrid             # (offspring mean, control parameter)


def select_and_reject(pset: ParticleSet, observed: ObservedSample,
                      kappa_hat: Optional[int] = None,
                      keep_fraction: float = 0.1,
                      min_group: int = _MIN_GROUP) -> SelectedSet:
    """Restrict to the selected model and keep the best
    ceil(keep_fraction * L) rows by summary distance.  min_group guards
    against fitting a regression on a sliver of a population; lower it
    only when the stage-1 particle count is itself small."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError("keep_fraction must be in (0, 1]")
    if min_group < 2:
        raise ConfigError("min_group must be at least 2")
    if kappa_hat is None:
        _, kappa_hat = kappa_posterior(pset)
    rows = np.flatnonzero(pset.kappa == kappa_hat)
    if rows.shape[0] < min_group:
        raise InsufficientParticles(
            f"only {rows.shape[0]} particles carry kappa={kappa_hat}; "
            f"at least {min_group} are needed, enlarge the particle count")
    obs_sum = summary(observed)
    obs_vec = obs_sum.as_vector()
    vecs = np.empty((rows.shape[0], obs_vec.shape[0]))
    dists = np.empty(rows.shape[0])
    particles = []
    for pos, i in enumerate(rows):
        part = pset.row(int(i))
        particles.append(part)
        vecs[pos] = summary(part.trajectory, like=observed).as_vector()
        dists[pos] = rho(vecs[pos], obs_vec)
    keep = math.ceil(keep_fraction * rows.shape[0])
    order = np.lexsort((pset.task_index[rows], dists))[:keep]
    order = order[np.argsort(pset.task_index[rows][order], kind="stable")]
    return SelectedSet(
        kappa_hat=int(kappa_hat),
        particles=tuple(particles[i] for i in order),
        summaries=vecs[order], rho=dists[order],
        epsilon2=float(dists[order].max()),
        observed_summary=obs_vec,
        task_index=pset.task_index[rows][order])


def epanechnikov_weights(dists: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon == 0.0:
        return np.ones_like(dists)
    return np.clip(1.0 - (dists / epsilon) ** 2, 0.0, None)


def regression_adjust(selected: SelectedSet,
                      control_family: str = "binomial-xi",
                      gamma_support: Optional[Tuple[float, float]] = None,
                      observed_summary: Optional[np.ndarray] = None) -> AdjustedSample:
    """Local linear correction: regress each parameter coordinate on the
    centered summaries and move every row to the observed point."""
    n = len(selected)
    obs = selected.observed_summary if observed_summary is None \
        else np.asarray(observed_summary, dtype=np.float64)
    dim = obs.shape[0]
    if n < dim + 2:
        raise InsufficientParticles(
            f"regression needs at least {dim + 2} rows, got {n}")

    theta = np.column_stack([selected.probs, selected.gamma])
    w = epanechnikov_weights(selected.rho, selected.epsilon2)
    centered = selected.summaries - obs

    fallback = False
    if np.allclose(centered, 0.0):
        adjusted = theta
    else:
        sw = np.sqrt(w)
        design = np.column_stack([np.ones(n), centered]) * sw[:, None]
        sol, _, rank, _ = np.linalg.lstsq(design, theta * sw[:, None],
                                          rcond=None)
        if rank < dim + 1:
            warnings.warn("regression design is singular, returning the "
                          "unadjusted sample", RegressionFallbackWarning)
            adjusted = theta
            fallback = True
        else:
            adjusted = theta - centered @ sol[1:, :]

    probs, gamma = adjusted[:, :-1], adjusted[:, -1]
    bad = np.any(probs < 0.0, axis=1)
    if gamma_support is not None:
        lo, hi = gamma_support
        bad |= (gamma < lo) | (gamma > hi)
    rejected = int(np.count_nonzero(bad))
    ok = ~bad
    probs, gamma, w = probs[ok], gamma[ok], w[ok]
    # only rows an actual adjustment moved off the simplex get projected
    # back; the identity paths must return the input bit for bit
    renorm = not fallback and probs.shape[0] > 0 and not np.allclose(centered, 0.0)
    if renorm:
        probs = probs / probs.sum(axis=1, keepdims=True)
    m = probs @ np.arange(probs.shape[1], dtype=np.float64) if probs.size \
        else np.empty(0)
    if control_family != "binomial-xi" and m.size:
        # density-dependent controls are undefined at or below criticality
        sub = m <= 1.0
        rejected += int(np.count_nonzero(sub))
        probs, gamma, m, w = probs[~sub], gamma[~sub], m[~sub], w[~sub]
    if probs.shape[0] < _MIN_ADJUSTED and n > 0:
        # adjustment (near-)annihilated the sample; a handful of survivors
        # is not a density estimate, the rejection-only rows still are
        warnings.warn(f"regression adjustment left {probs.shape[0]} of {n} "
                      "rows in the domain, returning the unadjusted sample",
                      RegressionFallbackWarning)
        probs, gamma = theta[:, :-1], theta[:, -1]
        w = epanechnikov_weights(selected.rho, selected.epsilon2)
        m = probs @ np.arange(probs.shape[1], dtype=np.float64)
        fallback, renorm, rejected = True, False, 0
    tau_m = gamma * m if control_family == "binomial-xi" \
        else np.full(gamma.shape[0], np.nan)
    return AdjustedSample(probs=probs, gamma=gamma, m=m, tau_m=tau_m,
                          weight=w, rejected_count=rejected,
                          control_family=control_family,
                          fallback_no_adjustment=fallback,
                          renormalized=renorm)


def _weighted_stats(values: np.ndarray, weights: np.ndarray):
    wn = weights / weights.sum()
    mu = float(wn @ values)
    sd = math.sqrt(float(wn @ (values - mu) ** 2))
    n_eff = 1.0 / float(wn @ wn)
    return wn, mu, sd, n_eff


def _silverman(sd: float, n_eff: float) -> float:
    return 1.06 * sd * n_eff ** (-0.2)


def kde(values: Sequence[float], weights: Optional[Sequence[float]] = None,
        grid_size: int = 512) -> DensityEstimate:
    """Weighted Gaussian kernel density on an equispaced grid spanning
    three bandwidths past the sample range."""
    values = np.asarray(values, dtype=np.float64)
    if weights is None:
        weights = np.ones_like(values)
    weights = np.asarray(weights, dtype=np.float64)
    if values.shape != weights.shape or values.ndim != 1:
        raise ValidationError("values and weights must be equal-length vectors")
    if np.any(weights < 0.0) or weights.sum() <= 0.0:
        raise ValidationError("weights must be >= 0 with positive total")
    live = weights > 0.0
    values, weights = values[live], weights[live]
    if np.unique(values).shape[0] < 2:
        raise DegenerateSample("need at least 2 distinct weighted values")
    wn, _, sd, n_eff = _weighted_stats(values, weights)
    h = _silverman(sd, n_eff)
    grid = np.linspace(values.min() - 3.0 * h, values.max() + 3.0 * h,
                       grid_size)
    z = (grid[:, None] - values[None, :]) / h
    density = np.exp(-0.5 * z * z) @ wn / (h * math.sqrt(2.0 * math.pi))
    return DensityEstimate(grid=grid, density=density, bandwidth=h)


def kde2d(x: Sequence[float], y: Sequence[float],
          weights: Optional[Sequence[float]] = None,
          grid_size: int = 64) -> DensityGrid:
    """Product Gaussian kernel on a rectangular grid."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if weights is None:
        weights = np.ones_like(x)
    weights = np.asarray(weights, dtype=np.float64)
    if x.shape != y.shape or x.shape != weights.shape:
        raise ValidationError("x, y and weights must be equal-length vectors")
    live = weights > 0.0
    x, y, weights = x[live], y[live], weights[live]
    if np.unique(x).shape[0] < 2 or np.unique(y).shape[0] < 2:
        raise DegenerateSample("need at least 2 distinct values per axis")
    wn, _, sdx, n_eff = _weighted_stats(x, weights)
    _, _, sdy, _ = _weighted_stats(y, weights)
    hx, hy = _silverman(sdx, n_eff), _silverman(sdy, n_eff)
    gx = np.linspace(x.min() - 3.0 * hx, x.max() + 3.0 * hx, grid_size)
    gy = np.linspace(y.min() - 3.0 * hy, y.max() + 3.0 * hy, grid_size)
    zx = (gx[:, None] - x[None, :]) / hx
    zy = (gy[:, None] - y[None, :]) / hy
    kx = np.exp(-0.5 * zx * zx) / (hx * math.sqrt(2.0 * math.pi))
    ky = np.exp(-0.5 * zy * zy) / (hy * math.sqrt(2.0 * math.pi))
    density = kx @ (wn[:, None] * ky.T)
    return DensityGrid(x_grid=gx, y_grid=gy, density=density,
                       bandwidth_x=hx, bandwidth_y=hy)


def hpd(density: DensityEstimate, level: float = 0.95) -> HpdInterval:
    """Water-filling: lower a horizontal threshold until the grid mass
    above it reaches `level`; return the bracketing interval."""
    if not 0.0 < level < 1.0:
        raise ConfigError("level must be in (0, 1)")
    d = density.density
    grid = density.grid
    mass = d / d.sum()
    order = np.argsort(d)[::-1]
    cum = np.cumsum(mass[order])
    k = int(np.searchsorted(cum, level)) + 1
    chosen = np.sort(order[:min(k, order.shape[0])])
    lo, hi = float(grid[chosen[0]]), float(grid[chosen[-1]])
    if lo == hi:
        dx = float(grid[1] - grid[0])
        lo, hi = lo - 0.5 * dx, hi + 0.5 * dx
    disconnected = bool(chosen[-1] - chosen[0] + 1 > chosen.shape[0])
    return HpdInterval(level=level, lo=lo, hi=hi, disconnected=disconnected)


_EQUILIBRIUM_FRACTION = {
    "verhulst": lambda m, shape: 1.0 - 1.0 / m,
    "theta-logistic": lambda m, shape: 1.0,
    "hassell": lambda m, shape: (m ** (1.0 / shape) - 1.0) / (m - 1.0),
    "gompertz": lambda m, shape: 1.0,
}


def equilibrium(family: str, m: float, capacity: float,
                shape: Optional[float] = None) -> float:
    """Stationary mean population size: the z solving m z s(m, z, K) = z."""
    DensityControl(family=family, capacity=capacity, shape=shape)
    if m <= 1.0:
        raise DomainError("equilibrium needs an offspring mean > 1")
    return capacity * _EQUILIBRIUM_FRACTION[family](m, shape)


def _equilibrium_rows(family: str, m: np.ndarray, capacity: np.ndarray,
                      shape: Optional[float]) -> np.ndarray:
    if np.any(m <= 1.0):
        raise DomainError("equilibrium needs offspring means > 1")
    frac = _EQUILIBRIUM_FRACTION[family]
    return capacity * np.array([frac(v, shape) for v in m])


def derived_posteriors(adjusted: AdjustedSample, level: float = 0.95,
                       grid_size: int = 512, joint_grid_size: int = 64,
                       control_shape: Optional[float] = None) -> DerivedPosteriors:
    """Weighted point estimates, KDEs and HPD intervals for the natural
    parameters of the selected control family."""
    if adjusted.n == 0:
        raise ValidationError("adjusted sample is empty")
    quantities = {"m": adjusted.m, "gamma": adjusted.gamma}
    if adjusted.control_family == "binomial-xi":
        quantities["tau_m"] = adjusted.tau_m
    else:
        quantities["K_e"] = _equilibrium_rows(
            adjusted.control_family, adjusted.m, adjusted.gamma, control_shape)
    wn = adjusted.weight / adjusted.weight.sum()
    marginals = {}
    for name, vals in quantities.items():
        est = kde(vals, adjusted.weight, grid_size=grid_size)
        marginals[name] = PosteriorSummary(
            name=name, mean=float(wn @ vals), density=est,
            interval=hpd(est, level=level))
    joint = kde2d(adjusted.m, adjusted.gamma, adjusted.weight,
                  grid_size=joint_grid_size)
    return DerivedPosteriors(marginals=marginals, joint=joint)
