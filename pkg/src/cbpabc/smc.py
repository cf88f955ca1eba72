"""Stage 1: sequential ABC over the offspring support bound.

The model index is the largest possible offspring count kappa; its
parameters are the offspring pmf on {0..kappa} and the control success
parameter (or the capacity, for density-dependent controls).  Iteration
1 screens prior draws through a keep-best pool on the raw-trajectory
distance; every later iteration perturbs surviving particles with a
Dirichlet proposal around the parent pmf and a normal step on the
control parameter, then corrects by importance weights

    w_i = prior(p_i, g_i) / sum_j w_j q(p_i, g_i | parent_j) 1{kappa match}

normalized within each kappa-group.  The kappa marginal itself is
carried by particle frequencies, not by the stored weights: those are
conditional on the group, and every non-empty group's weights sum to 1.

All proposal sampling runs inside the compiled chunk kernels; this
module owns the orchestration, the weight algebra, and the estimators.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import backend
from .distance import ToleranceSchedule
from .errors import (
    ConfigError,
    DegenerateModelWarning,
    DegenerateSample,
    ValidationError,
)
from .laws import FAMILY_CODES, ObservedSample, Trajectory
from .pool import CHUNK, PoolResult, run_pool

_LN_SQRT_2PI = 0.9189385332046727

# Proposal support nudges (see the simplex-boundary note in proposal
# construction): parents are mixed with the uniform barycenter before
# becoming Dirichlet concentrations so no coordinate can freeze at 0.
_NUDGE = 1e-6


@dataclass(frozen=True)
class GammaPrior:
    """Prior for the control parameter: Beta(a, b) on (0,1) or
    Uniform(a, b); the latter is the natural choice when the parameter
    is a carrying capacity."""

    kind: str
    a: float
    b: float

    def __post_init__(self) -> None:
        if self.kind not in ("beta", "uniform"):
            raise ConfigError(f"unknown gamma prior {self.kind!r}")
        if self.kind == "beta" and (self.a <= 0.0 or self.b <= 0.0):
            raise ConfigError("beta prior needs positive parameters")
        if self.kind == "uniform" and not self.a < self.b:
            raise ConfigError("uniform prior needs a < b")

    @property
    def support(self) -> Tuple[float, float]:
        if self.kind == "beta":
            return (0.0, 1.0)
        return (self.a, self.b)

    def logpdf(self, x: float) -> float:
        lo, hi = self.support
        if not lo < x < hi:
            return -math.inf
        if self.kind == "uniform":
            return -math.log(self.hi_minus_lo)
        return ((self.a - 1.0) * math.log(x) + (self.b - 1.0) * math.log1p(-x)
                - (math.lgamma(self.a) + math.lgamma(self.b)
                   - math.lgamma(self.a + self.b)))

    @property
    def hi_minus_lo(self) -> float:
        lo, hi = self.support
        return hi - lo

    def kernel_code(self) -> Tuple[int, float, float]:
        return (0 if self.kind == "beta" else 1, self.a, self.b)


@dataclass(frozen=True)
class PriorSpec:
    """Joint prior: kappa uniform on {2..kappa_max}, pmf Dirichlet(alpha)
    given kappa, control parameter from gamma_prior."""

    kappa_max: int
    gamma_prior: GammaPrior
    alpha: Optional[Mapping[int, Sequence[float]]] = None

    def __post_init__(self) -> None:
        if self.kappa_max < 3:
            raise ConfigError("kappa_max must be >= 3")
        if self.alpha is not None:
            for kap, vec in self.alpha.items():
                if not 2 <= kap <= self.kappa_max:
                    raise ConfigError(f"alpha given for kappa={kap} outside 2..{self.kappa_max}")
                if len(vec) != kap + 1:
                    raise ConfigError(f"alpha for kappa={kap} must have {kap + 1} entries")
                if any(a <= 0.0 for a in vec):
                    raise ConfigError("dirichlet parameters must be > 0")

    def alpha_matrix(self) -> np.ndarray:
        mat = np.ones((self.kappa_max + 1, self.kappa_max + 1))
        if self.alpha is not None:
            for kap, vec in self.alpha.items():
                mat[kap, :kap + 1] = vec
        return mat

    def log_pmf_prior(self, kappa: int, probs: np.ndarray) -> float:
        """log Dirichlet(alpha_kappa) density at probs[0..kappa]."""
        conc = self.alpha_matrix()[kappa, :kappa + 1]
        return _dirichlet_logpdf(conc, probs[:kappa + 1])


@dataclass(frozen=True)
class SmcConfig:
    """Statistical knobs of a stage-1 run."""

    schedule: ToleranceSchedule
    tuning_a: float = 30.0
    sigma_floor: Optional[float] = None     # variance floor; default 1e-8 * support width
    gamma_redraw_budget: int = 100
    attempt_factor: int = 50
    size_cap: int = 10**12

    def __post_init__(self) -> None:
        if self.tuning_a <= 0.0:
            raise ConfigError("tuning_a must be > 0")
        if self.sigma_floor is not None and self.sigma_floor < 0.0:
            raise ConfigError("sigma_floor must be >= 0")
        if self.gamma_redraw_budget < 1 or self.attempt_factor < 1:
            raise ConfigError("budgets must be >= 1")

    @property
    def particles(self) -> int:
        return self.schedule.particles

    @property
    def iterations(self) -> int:
        return self.schedule.iterations


@dataclass(frozen=True)
class Particle:
    """One retained draw; probs has exactly kappa + 1 entries."""

    kappa: int
    probs: Tuple[float, ...]
    gamma: float
    weight: float
    distance: float
    trajectory: Optional[Trajectory] = None

    @property
    def offspring_mean(self) -> float:
        return float(sum(j * p for j, p in enumerate(self.probs)))


@dataclass(frozen=True)
class ParticleSet:
    """A whole iteration's output, sorted by kappa then task order.

    probs rows are zero-padded beyond each particle's own kappa.  At
    iteration 1 the weights are globally uniform (1/N); from iteration 2
    they are normalized within each kappa-group, and group_mass keeps the
    raw importance mass of each group from before that normalization.
    """

    t: int
    epsilon: float
    kappa: np.ndarray
    probs: np.ndarray
    gamma: np.ndarray
    weight: np.ndarray
    distance: np.ndarray
    sizes: np.ndarray
    phi: np.ndarray
    task_index: np.ndarray
    group_mass: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.kappa.shape[0]

    @property
    def kappa_max(self) -> int:
        return self.probs.shape[1] - 1

    def group_counts(self) -> np.ndarray:
        return np.bincount(self.kappa, minlength=self.kappa_max + 1)

    def group_offsets(self) -> np.ndarray:
        counts = self.group_counts()
        off = np.zeros(self.kappa_max + 2, dtype=np.int64)
        off[1:] = np.cumsum(counts)
        return off

    def mass(self) -> np.ndarray:
        """Importance mass per kappa-group (sums to 1).  Falls back to
        relative frequencies when no raw masses were recorded, which is
        exact whenever the set is equally weighted."""
        if self.group_mass is not None:
            return self.group_mass
        return self.group_counts() / self.n

    def global_weights(self) -> np.ndarray:
        """Weights renormalized to sum to 1 over the whole set, giving
        each kappa-group its frequency share."""
        out = np.empty(self.n)
        off = self.group_offsets()
        for kap in range(2, self.kappa_max + 1):
            lo, hi = off[kap], off[kap + 1]
            if hi == lo:
                continue
            w = self.weight[lo:hi]
            out[lo:hi] = (w / w.sum()) * ((hi - lo) / self.n)
        return out

    def offspring_means(self) -> np.ndarray:
        return self.probs @ np.arange(self.probs.shape[1], dtype=np.float64)

    def row(self, i: int) -> Particle:
        kap = int(self.kappa[i])
        sizes = self.sizes[i]
        zero = np.flatnonzero(sizes == 0)
        traj = Trajectory(sizes=sizes.copy(), last_progenitors=int(self.phi[i]),
                          extinct_at=int(zero[0]) if zero.size else None)
        return Particle(kappa=kap, probs=tuple(self.probs[i, :kap + 1]),
                        gamma=float(self.gamma[i]), weight=float(self.weight[i]),
                        distance=float(self.distance[i]), trajectory=traj)


def _dirichlet_logpdf(conc: np.ndarray, x: np.ndarray) -> float:
    if abs(float(np.sum(x)) - 1.0) > 1e-9 or np.any(x <= 0.0):
        return -math.inf
    logc = math.lgamma(float(np.sum(conc))) - sum(math.lgamma(c) for c in conc)
    return logc + float(np.sum((conc - 1.0) * np.log(x)))


def _nudged(probs: np.ndarray, k1: int) -> np.ndarray:
    return (1.0 - _NUDGE) * probs[:k1] + _NUDGE / k1


def _family_kind(family: str) -> int:
    if family == "binomial-xi":
        return 0
    if family not in FAMILY_CODES:
        raise ConfigError(f"unknown control family {family!r}")
    return FAMILY_CODES[family]


def _control_code_of(family: str, shape: Optional[float]) -> Tuple[int, float]:
    if family == "binomial-xi":
        if shape is not None:
            raise ConfigError("binomial-xi control takes no shape parameter")
        return 0, 0.0
    if family not in FAMILY_CODES:
        raise ConfigError(f"unknown control family {family!r}")
    needs_shape = family in ("theta-logistic", "hassell")
    if needs_shape and (shape is None or shape <= 0.0):
        raise ConfigError(f"{family} control needs a shape parameter > 0")
    if not needs_shape and shape is not None:
        raise ConfigError(f"{family} control takes no shape parameter")
    return FAMILY_CODES[family], 0.0 if shape is None else float(shape)


def _observed_encoding(observed: ObservedSample):
    idx = observed.observed_indices()
    vals = observed.observed_values()
    if np.any(vals <= 0.0):
        raise ValidationError(
            "observed sizes must be positive: a zero coordinate makes every "
            "simulation incomparable under the relative-ratio distance")
    vec = vals
    if observed.has_phi:
        if observed.last_progenitors <= 0:
            raise ValidationError("observed progenitor count must be positive")
        vec = np.append(vec, float(observed.last_progenitors))
    return idx, 1 if observed.has_phi else 0, vec


def _as_particle_set(t: int, res: PoolResult, weight: np.ndarray,
                     order: np.ndarray,
                     group_mass: Optional[np.ndarray] = None) -> ParticleSet:
    return ParticleSet(
        t=t, epsilon=res.epsilon,
        kappa=res["kappa"][order], probs=res["probs"][order],
        gamma=res["gamma"][order], weight=weight[order],
        distance=res["dist"][order], sizes=res["sizes"][order],
        phi=res["phi"][order], task_index=res.task_index[order],
        group_mass=group_mass)


def _chunk_buffers(n: int, width: int, ngen: int) -> Dict[str, np.ndarray]:
    return {
        "kappa": np.zeros(n, dtype=np.int64),
        "probs": np.zeros((n, width)),
        "gamma": np.zeros(n),
        "dist": np.full(n, np.inf),
        "sizes": np.zeros((n, ngen + 1), dtype=np.int64),
        "phi": np.zeros(n, dtype=np.int64),
        "valid": np.zeros(n, dtype=np.uint8),
    }


def smc_iteration_1(prior: PriorSpec, observed: ObservedSample, cfg: SmcConfig,
                    seed: int, control_family: str = "binomial-xi",
                    control_shape: Optional[float] = None,
                    threads: int = 1) -> ParticleSet:
    """Prior sampling pass: keep the best N of the first pool of
    comparable simulations; all weights 1/N."""
    k = backend.active()
    ctl_kind, ctl_shape = _control_code_of(control_family, control_shape)
    gp_kind, gp_a, gp_b = prior.gamma_prior.kernel_code()
    obs_idx, has_phi, obs_vec = _observed_encoding(observed)
    alpha_mat = prior.alpha_matrix()
    width = prior.kappa_max + 1
    z0 = observed.sizes[0]
    ngen = observed.generations

    def chunk_fn(t0: int, n: int) -> Dict[str, np.ndarray]:
        out = _chunk_buffers(n, width, ngen)
        k.chunk_iter1(seed, 1, t0, n, prior.kappa_max, alpha_mat,
                      gp_kind, gp_a, gp_b, ctl_kind, ctl_shape,
                      z0, ngen, cfg.size_cap, obs_idx, has_phi, obs_vec,
                      out["kappa"], out["probs"], out["gamma"], out["dist"],
                      out["sizes"], out["phi"], out["valid"])
        return out

    n_keep = cfg.particles
    res = run_pool(chunk_fn, cfg.schedule.pool_sizes[0], n_keep,
                   threads=threads, attempt_factor=cfg.attempt_factor)
    order = np.argsort(res["kappa"], kind="stable")
    weight = np.full(n_keep, 1.0 / n_keep)
    mass = np.bincount(res["kappa"], minlength=width) / n_keep
    return _as_particle_set(1, res, weight, order, mass)


def adaptive_sigma(prev: ParticleSet, cfg: SmcConfig,
                   support: Tuple[float, float]) -> float:
    """Proposal scale: sqrt of twice the weighted empirical variance of
    the previous control parameters, floored to stay proper."""
    w = prev.global_weights()
    mu = float(np.sum(w * prev.gamma))
    var = float(np.sum(w * (prev.gamma - mu) ** 2))
    floor = cfg.sigma_floor
    if floor is None:
        floor = 1e-8 * (support[1] - support[0])
    return math.sqrt(max(2.0 * var, floor))


def smc_iteration_t(prev: ParticleSet, prior: PriorSpec, cfg: SmcConfig,
                    t: int, observed: ObservedSample, seed: int,
                    control_family: str = "binomial-xi",
                    control_shape: Optional[float] = None,
                    threads: int = 1) -> ParticleSet:
    """One refinement pass: perturb parents, rescreen, reweight."""
    if t < 2 or t > cfg.iterations:
        raise ConfigError(f"iteration index {t} outside 2..{cfg.iterations}")
    k = backend.active()
    ctl_kind, ctl_shape = _control_code_of(control_family, control_shape)
    obs_idx, has_phi, obs_vec = _observed_encoding(observed)
    glo, ghi = prior.gamma_prior.support
    sigma = adaptive_sigma(prev, cfg, (glo, ghi))
    width = prior.kappa_max + 1
    z0 = observed.sizes[0]
    ngen = observed.generations

    group_off = prev.group_offsets()
    par_cumw = np.zeros(prev.n)
    for kap in range(2, prev.kappa_max + 1):
        lo, hi = group_off[kap], group_off[kap + 1]
        if hi == lo:
            continue
        w = prev.weight[lo:hi]
        cw = np.cumsum(w / w.sum())
        cw[-1] = 1.0
        par_cumw[lo:hi] = cw
    par_mean = prev.offspring_means()

    def chunk_fn(t0: int, n: int) -> Dict[str, np.ndarray]:
        out = _chunk_buffers(n, width, ngen)
        k.chunk_itert(seed, t, t0, n, prev.kappa_max, glo, ghi,
                      ctl_kind, ctl_shape, cfg.tuning_a, sigma,
                      cfg.gamma_redraw_budget,
                      prev.probs, par_mean, prev.gamma, group_off, par_cumw,
                      z0, ngen, cfg.size_cap, obs_idx, has_phi, obs_vec,
                      out["kappa"], out["probs"], out["gamma"], out["dist"],
                      out["sizes"], out["phi"], out["valid"])
        return out

    n_keep = cfg.particles
    res = run_pool(chunk_fn, cfg.schedule.pool_sizes[t - 1], n_keep,
                   threads=threads, attempt_factor=cfg.attempt_factor)
    weight, alive, mass = _importance_weights(prior, cfg, prev, res, sigma,
                                              ctl_kind, (glo, ghi))
    order = np.argsort(res["kappa"][alive], kind="stable")
    trimmed = PoolResult(
        fields={key: val[alive] for key, val in res.fields.items()},
        task_index=res.task_index[alive], epsilon=res.epsilon,
        tasks_spawned=res.tasks_spawned, pool_size=res.pool_size)
    return _as_particle_set(t, trimmed, weight, order, mass)


def _log_gamma_factor(cand_gamma: np.ndarray, cand_mean: np.ndarray,
                      par_gamma: np.ndarray, par_mean: np.ndarray,
                      sigma: float, ctl_kind: int,
                      support: Tuple[float, float]) -> np.ndarray:
    """log q(gamma_i | parent_j) as an (i, j) matrix."""
    if ctl_kind == 0:
        # gamma' = U / m' with U ~ N(parent gamma * parent mean, sigma^2):
        # density N(gamma' m'; mu_j, sigma) with Jacobian m'
        u = cand_gamma * cand_mean
        z = (u[:, None] - (par_gamma * par_mean)[None, :]) / sigma
        return (-0.5 * z * z - math.log(sigma) - _LN_SQRT_2PI
                + np.log(cand_mean)[:, None])
    # truncated-normal random walk on the parameter itself
    lo, hi = support
    z = (cand_gamma[:, None] - par_gamma[None, :]) / sigma
    sq2 = math.sqrt(2.0)
    zhi = (hi - par_gamma) / sigma
    zlo = (lo - par_gamma) / sigma
    mass = 0.5 * (np.array([math.erf(v / sq2) for v in zhi])
                  - np.array([math.erf(v / sq2) for v in zlo]))
    return (-0.5 * z * z - math.log(sigma) - _LN_SQRT_2PI
            - np.log(mass)[None, :])


def _importance_weights(prior: PriorSpec, cfg: SmcConfig, prev: ParticleSet,
                        res: PoolResult, sigma: float, ctl_kind: int,
                        support: Tuple[float, float]):
    """Per-group normalized weights for the retained candidates, the
    surviving-row mask (groups whose weights underflow are dropped), and
    each group's share of the raw importance mass, which is the model
    posterior estimate the normalization would otherwise erase."""
    alpha_mat = prior.alpha_matrix()
    group_off = prev.group_offsets()
    cand_kappa = res["kappa"]
    cand_probs = res["probs"]
    cand_gamma = res["gamma"]
    cand_mean = cand_probs @ np.arange(cand_probs.shape[1], dtype=np.float64)

    logw = np.full(cand_kappa.shape[0], -np.inf)
    for kap in np.unique(cand_kappa):
        rows = np.flatnonzero(cand_kappa == kap)
        lo, hi = group_off[kap], group_off[kap + 1]
        k1 = kap + 1
        x = cand_probs[rows][:, :k1]
        logx = np.log(x)

        # numerator: prior density at the candidate
        conc0 = alpha_mat[kap, :k1]
        lognum = (math.lgamma(conc0.sum()) - sum(math.lgamma(c) for c in conc0)
                  + logx @ (conc0 - 1.0))
        lognum += np.array([prior.gamma_prior.logpdf(g) for g in cand_gamma[rows]])

        # denominator: mixture of parent proposal densities
        pw = prev.weight[lo:hi]
        pw = pw / pw.sum()
        conc = cfg.tuning_a * np.apply_along_axis(_nudged, 1, prev.probs[lo:hi], k1)
        logc = np.array([math.lgamma(c.sum()) - sum(math.lgamma(v) for v in c)
                         for c in conc])
        logdir = logc[None, :] + logx @ (conc - 1.0).T
        logq = logdir + _log_gamma_factor(cand_gamma[rows], cand_mean[rows],
                                          prev.gamma[lo:hi], prev.offspring_means()[lo:hi],
                                          sigma, ctl_kind, support)
        logmix = logq + np.log(pw)[None, :]
        peak = logmix.max(axis=1)
        logden = peak + np.log(np.exp(logmix - peak[:, None]).sum(axis=1))
        logw[rows] = lognum - logden

    weight = np.zeros_like(logw)
    alive = np.ones(logw.shape[0], dtype=bool)
    mass = np.zeros(prev.kappa_max + 1)
    gpeak = logw.max()
    for kap in np.unique(cand_kappa):
        rows = np.flatnonzero(cand_kappa == kap)
        lw = logw[rows]
        peak = lw.max()
        if not np.isfinite(peak):
            warnings.warn(f"kappa={kap}: importance weights underflowed, "
                          "dropping the group", DegenerateModelWarning)
            alive[rows] = False
            continue
        w = np.exp(lw - peak)
        weight[rows] = w / w.sum()
        mass[kap] = float(np.exp(lw - gpeak).sum())
    total = mass.sum()
    if not total > 0.0:
        raise DegenerateSample("importance weights underflowed in every "
                               "kappa group; the proposal scale collapsed")
    mass /= total
    return weight[alive], alive, mass


def propose(parent: Particle, cfg: SmcConfig, sigma: float, seed: int,
            task: int = 0, control_family: str = "binomial-xi",
            support: Tuple[float, float] = (0.0, 1.0)):
    """Draw one (probs, gamma) proposal from a parent; test/diagnostic
    mirror of what the chunk kernels do inline."""
    k = backend.active()
    s = np.empty(4, dtype=np.uint64)
    k.stream_init(seed, 909, task, s)
    k1 = parent.kappa + 1
    conc = cfg.tuning_a * _nudged(np.asarray(parent.probs), k1)
    probs = np.empty(k1)
    k.dirichlet_draw(s, conc, k1, probs)
    m_new = float(probs @ np.arange(k1))
    ctl_kind = _family_kind(control_family)
    for _ in range(cfg.gamma_redraw_budget):
        if ctl_kind == 0:
            g = (k.normal_draw(s) * sigma + parent.gamma * parent.offspring_mean) / m_new
        else:
            g = k.normal_draw(s) * sigma + parent.gamma
        if support[0] < g < support[1]:
            return probs, float(g)
    raise ValidationError("proposal could not land in the support; "
                          "sigma is far too large for this parent")


def proposal_density(probs_new: np.ndarray, gamma_new: float, parent: Particle,
                     cfg: SmcConfig, sigma: float, prior: PriorSpec,
                     control_family: str = "binomial-xi") -> float:
    """q(probs_new, gamma_new | parent); 0 off the support or when the
    model indices differ."""
    probs_new = np.asarray(probs_new, dtype=np.float64)
    if probs_new.shape[0] - 1 != parent.kappa:
        return 0.0
    lo, hi = prior.gamma_prior.support
    if not lo < gamma_new < hi:
        return 0.0
    k1 = parent.kappa + 1
    conc = cfg.tuning_a * _nudged(np.asarray(parent.probs), k1)
    logdir = _dirichlet_logpdf(conc, probs_new)
    if not math.isfinite(logdir):
        return 0.0
    ctl_kind = _family_kind(control_family)
    m_new = float(probs_new @ np.arange(k1))
    logg = _log_gamma_factor(np.array([gamma_new]), np.array([m_new]),
                             np.array([parent.gamma]),
                             np.array([parent.offspring_mean]),
                             sigma, ctl_kind, (lo, hi))[0, 0]
    return math.exp(logdir + logg)


def kappa_posterior(pset: ParticleSet):
    """Posterior pmf of kappa (each group's share of the importance
    mass, indexed by kappa) and the closest-integer point estimate of
    its weighted mean."""
    pmf = pset.mass().astype(np.float64).copy()
    pmf /= pmf.sum()
    mean = float(pmf @ np.arange(pmf.shape[0]))
    kappa_hat = int(math.floor(mean + 0.5))   # half rounds up
    return pmf, kappa_hat


def run_smc(prior: PriorSpec, observed: ObservedSample, cfg: SmcConfig,
            seed: int, control_family: str = "binomial-xi",
            control_shape: Optional[float] = None,
            threads: int = 1) -> List[ParticleSet]:
    """Full stage-1 run; returns one ParticleSet per iteration."""
    if control_family == "binomial-xi" and prior.gamma_prior.support[1] > 1.0:
        raise ConfigError("binomial-xi success parameter lives in (0, 1); "
                          "the prior support exceeds it")
    populations = [smc_iteration_1(prior, observed, cfg, seed,
                                   control_family, control_shape, threads)]
    for t in range(2, cfg.iterations + 1):
        nxt = smc_iteration_t(populations[-1], prior, cfg, t, observed, seed,
                              control_family, control_shape, threads)
        assert nxt.epsilon < populations[-1].epsilon, \
            "tolerance failed to decrease; the schedule is inconsistent"
        populations.append(nxt)
    return populations
