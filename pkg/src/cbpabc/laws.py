"""Offspring laws, control laws, and the trajectory simulator.

A controlled branching process starts at ``Z_0 = z0`` and evolves by

    Z_{k+1} = X_{k,1} + ... + X_{k,phi_k(Z_k)}

where the ``X_{k,j}`` are iid draws from the offspring law and
``phi_k(z)`` is a binomial control variate whose size and success
probability are set by the control law (an empty sum is 0, so the state
0 is absorbing).  Two control families are shipped:

* :class:`BinomialControl` draws ``phi(z) ~ Binomial(xi(z), gamma)``
  with the default size map ``xi(z) = z + floor(log z)`` (natural log).
* :class:`DensityControl` draws ``phi(z) ~ Binomial(z, s(m, z, K))``
  where ``s`` is a density-dependent success probability chosen from
  the verhulst / theta-logistic / hassell / gompertz families and ``m``
  is the mean of the offspring law the process is paired with.

Everything here is an immutable value object; randomness enters only
through an explicit ``(seed, task)`` pair that selects a counter-based
substream, so simulations are reproducible across runs and threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from . import backend
from .errors import DomainError, ValidationError

# Population sizes are clamped here during simulation.  Supercritical
# paths that explode stay finite (and carry an enormous, never-selected
# distance) instead of overflowing int64.
DEFAULT_SIZE_CAP = 10**12

# Substream tags; every module draws from a disjoint tag range so equal
# (seed, task) pairs in different operations never share a stream.
_TAG_SIMULATE = 101
_TAG_OFFSPRING_SUM = 102

_SUM_TOL = 1e-12

FAMILY_CODES = {
    "verhulst": 1,
    "theta-logistic": 2,
    "hassell": 3,
    "gompertz": 4,
}

# Families whose success probability uses the offspring mean as a base
# or denominator and is therefore only defined for m > 1.
_NEEDS_SUPERCRITICAL_MEAN = ("theta-logistic", "hassell", "gompertz")


def xi_size(z: int) -> int:
    """Default progenitor-pool size map: z + floor(log z), natural log.

    The epsilon guard keeps floor() from misfiring when log(z) lands a
    hair under an integer (log is not exact in floating point).
    """
    if z <= 0:
        return 0
    return z + int(math.floor(math.log(z) + 1e-12))


@dataclass(frozen=True)
class FinitePmf:
    """Offspring law with finite support {0, ..., kappa}, kappa >= 2."""

    probs: Tuple[float, ...]

    def __post_init__(self) -> None:
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "probs", probs)
        if len(probs) < 3:
            raise ValidationError("finite pmf needs support {0..kappa} with kappa >= 2")
        if any(not math.isfinite(p) or p < 0.0 for p in probs):
            raise ValidationError("finite pmf entries must be finite and >= 0")
        if abs(math.fsum(probs) - 1.0) > _SUM_TOL:
            raise ValidationError("finite pmf entries must sum to 1 within 1e-12")

    @classmethod
    def from_binomial(cls, size: int, success: float) -> "FinitePmf":
        """Tabulate a Binomial(size, success) law on {0..size} exactly."""
        if size < 2:
            raise ValidationError("finite pmf support needs size >= 2")
        if not 0.0 <= success <= 1.0:
            raise ValidationError("success probability must lie in [0, 1]")
        pmf = [math.comb(size, j) * success**j * (1.0 - success) ** (size - j)
               for j in range(size + 1)]
        total = math.fsum(pmf)
        return cls(tuple(p / total for p in pmf))

    @property
    def kappa(self) -> int:
        return len(self.probs) - 1

    def mean(self) -> float:
        return math.fsum(j * p for j, p in enumerate(self.probs))

    def cdf(self, k: int) -> float:
        if k < 0:
            return 0.0
        return min(1.0, math.fsum(self.probs[: k + 1]))


@dataclass(frozen=True)
class Geometric:
    """Offspring law P(X = k) = q (1-q)^k on k >= 0."""

    q: float

    def __post_init__(self) -> None:
        if not 0.0 < self.q < 1.0:
            raise ValidationError("geometric parameter q must lie in (0, 1)")

    def mean(self) -> float:
        return (1.0 - self.q) / self.q

    def cdf(self, k: int) -> float:
        if k < 0:
            return 0.0
        return 1.0 - (1.0 - self.q) ** (k + 1)


@dataclass(frozen=True)
class Binomial:
    """Offspring law Binomial(size, success)."""

    size: int
    success: float

    def __post_init__(self) -> None:
        if int(self.size) != self.size or self.size < 1:
            raise ValidationError("binomial size must be an integer >= 1")
        object.__setattr__(self, "size", int(self.size))
        if not 0.0 <= self.success <= 1.0:
            raise ValidationError("binomial success must lie in [0, 1]")

    def mean(self) -> float:
        return self.size * self.success

    def cdf(self, k: int) -> float:
        if k < 0:
            return 0.0
        k = min(k, self.size)
        p, n = self.success, self.size
        return math.fsum(math.comb(n, j) * p**j * (1.0 - p) ** (n - j)
                         for j in range(k + 1))


OffspringLaw = Union[FinitePmf, Geometric, Binomial]


@dataclass(frozen=True)
class BinomialControl:
    """Control phi(z) ~ Binomial(xi(z), gamma).

    gamma = 1.0 is accepted as the degenerate boundary (phi = xi(z)
    surely); inference only ever proposes gamma inside (0, 1).  A custom
    xi map may be supplied for experiments; the default log rule runs on
    the compiled fast path, a custom map falls back to a step-by-step
    driver built from the same sampler primitives.
    """

    gamma: float
    xi: Optional[Callable[[int], int]] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValidationError("control success gamma must lie in (0, 1]")

    def xi_map(self, z: int) -> int:
        if self.xi is None:
            return xi_size(z)
        return self.xi(z)


@dataclass(frozen=True)
class DensityControl:
    """Control phi(z) ~ Binomial(z, s(m, z, capacity)).

    The success function s is selected by `family`; theta-logistic and
    hassell take a positive shape parameter (theta, beta), verhulst and
    gompertz take none.  All four families require a supercritical
    offspring mean; the simulator enforces m > 1 when pairing.
    """

    family: str
    capacity: float
    shape: Optional[float] = None

    def __post_init__(self) -> None:
        if self.family not in FAMILY_CODES:
            raise ValidationError(
                f"unknown growth family {self.family!r}; "
                f"expected one of {sorted(FAMILY_CODES)}")
        if not (math.isfinite(self.capacity) and self.capacity > 0.0):
            raise ValidationError("capacity must be finite and > 0")
        needs_shape = self.family in ("theta-logistic", "hassell")
        if needs_shape:
            if self.shape is None or not (math.isfinite(self.shape) and self.shape > 0.0):
                raise ValidationError(f"{self.family} control needs a shape parameter > 0")
        elif self.shape is not None:
            raise ValidationError(f"{self.family} control takes no shape parameter")


ControlLaw = Union[BinomialControl, DensityControl]


def offspring_mean(law: OffspringLaw) -> float:
    return law.mean()


def success_probability(control: DensityControl, m: float, z: float) -> float:
    """Density-dependent success s(m, z, capacity), clamped to [0, 1]."""
    if control.family in _NEEDS_SUPERCRITICAL_MEAN and m <= 1.0:
        raise DomainError(f"{control.family} control needs offspring mean > 1")
    shape = 0.0 if control.shape is None else control.shape
    k = backend.active()
    return float(k.s_density(FAMILY_CODES[control.family], float(m), float(z),
                             control.capacity, shape))


def control_mean(law: ControlLaw, z: int, m: Optional[float] = None) -> float:
    """Expected progenitor count E[phi(z)] from state z."""
    if z < 0:
        raise DomainError("state z must be >= 0")
    if isinstance(law, BinomialControl):
        return law.gamma * law.xi_map(z)
    if m is None or m <= 0.0:
        raise DomainError("density-dependent control mean needs the offspring mean m > 0")
    return z * success_probability(law, m, z)


def tau(law: ControlLaw) -> float:
    """Asymptotic progenitor fraction lim_k phi-mean(k) / k."""
    if isinstance(law, BinomialControl):
        return law.gamma
    raise DomainError(
        "density-dependent controls drive the progenitor fraction to 0; "
        "tau is degenerate and not invertible")


def tau_inverse(law: ControlLaw, u: float) -> float:
    if not isinstance(law, BinomialControl):
        raise DomainError("tau is not invertible for density-dependent controls")
    if not 0.0 < u < 1.0:
        raise DomainError("tau_inverse is defined on (0, 1) only")
    return u


@dataclass(frozen=True)
class Trajectory:
    """A simulated path Z_0..Z_n with the final progenitor count."""

    sizes: np.ndarray
    last_progenitors: Optional[int] = None
    extinct_at: Optional[int] = None

    def __post_init__(self) -> None:
        sizes = np.asarray(self.sizes, dtype=np.int64)
        sizes.flags.writeable = False
        object.__setattr__(self, "sizes", sizes)
        if sizes.ndim != 1 or sizes.shape[0] < 2:
            raise ValidationError("trajectory needs at least Z_0 and Z_1")
        if np.any(sizes < 0):
            raise ValidationError("population sizes must be >= 0")
        zero = np.flatnonzero(sizes == 0)
        if zero.size and np.any(sizes[zero[0]:] != 0):
            raise ValidationError("extinction is absorbing; sizes cannot recover from 0")
        if self.last_progenitors is not None:
            if self.last_progenitors < 0:
                raise ValidationError("progenitor count must be >= 0")
            if self.last_progenitors == 0 and sizes[-1] != 0:
                raise ValidationError("zero progenitors force Z_n = 0")

    @property
    def generations(self) -> int:
        return self.sizes.shape[0] - 1

    @property
    def extinct(self) -> bool:
        return self.extinct_at is not None


@dataclass(frozen=True)
class ObservedSample:
    """Observed path with optional gaps (None = unrecorded generation)."""

    sizes: Tuple[Optional[int], ...]
    last_progenitors: Optional[int] = None

    def __post_init__(self) -> None:
        sizes = tuple(None if v is None else int(v) for v in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if len(sizes) < 2:
            raise ValidationError("observed sample needs at least 2 generations")
        if sizes[0] is None or sizes[0] < 1:
            raise ValidationError("Z_0 must be observed and >= 1")
        observed = [v for v in sizes if v is not None]
        if len(observed) < 2:
            raise ValidationError("observed sample needs at least 2 recorded entries")
        if any(v < 0 for v in observed):
            raise ValidationError("population sizes must be >= 0")
        if self.last_progenitors is not None and self.last_progenitors < 0:
            raise ValidationError("progenitor count must be >= 0")

    @property
    def generations(self) -> int:
        return len(self.sizes) - 1

    @property
    def has_phi(self) -> bool:
        return self.last_progenitors is not None

    def observed_indices(self) -> np.ndarray:
        return np.array([i for i, v in enumerate(self.sizes) if v is not None],
                        dtype=np.int64)

    def observed_values(self) -> np.ndarray:
        return np.array([v for v in self.sizes if v is not None], dtype=np.float64)


def offspring_code(law: OffspringLaw) -> Tuple[int, float, float, np.ndarray, int]:
    """Kernel encoding (kind, par1, par2, probs, support length) of a law."""
    if isinstance(law, FinitePmf):
        return 0, 0.0, 0.0, np.asarray(law.probs, dtype=np.float64), law.kappa + 1
    empty = np.empty(0, dtype=np.float64)
    if isinstance(law, Geometric):
        return 1, law.q, 0.0, empty, 0
    if isinstance(law, Binomial):
        return 2, float(law.size), law.success, empty, 0
    raise ValidationError(f"unknown offspring law {type(law).__name__}")


def control_code(law: ControlLaw) -> Tuple[int, float, float]:
    """Kernel encoding (kind, g, shape) of a control law."""
    if isinstance(law, BinomialControl):
        if law.xi is not None:
            raise ValidationError("custom xi maps have no compiled encoding")
        return 0, law.gamma, 0.0
    if isinstance(law, DensityControl):
        shape = 0.0 if law.shape is None else law.shape
        return FAMILY_CODES[law.family], law.capacity, shape
    raise ValidationError(f"unknown control law {type(law).__name__}")


def _check_pairing(offspring: OffspringLaw, control: ControlLaw) -> float:
    m = offspring.mean()
    if isinstance(control, DensityControl) and m <= 1.0:
        raise DomainError("density-dependent controls need offspring mean > 1 "
                          f"(got m = {m:g})")
    return m


def simulate(offspring: OffspringLaw, control: ControlLaw, z0: int,
             generations: int, seed: int, task: int = 0,
             size_cap: int = DEFAULT_SIZE_CAP) -> Trajectory:
    """Run the process for `generations` steps from Z_0 = z0.

    Deterministic in (seed, task): each call owns the substream derived
    from that pair and never touches shared state, so simulations may be
    fanned out across threads in any order.
    """
    if z0 < 1:
        raise ValidationError("z0 must be >= 1")
    if generations < 1:
        raise ValidationError("need at least one generation")
    m = _check_pairing(offspring, control)
    k = backend.active()
    s = np.empty(4, dtype=np.uint64)
    k.stream_init(seed, _TAG_SIMULATE, task, s)
    sizes = np.empty(generations + 1, dtype=np.int64)

    if isinstance(control, BinomialControl) and control.xi is not None:
        phi_last, extinct_at = _simulate_custom_xi(
            k, s, offspring, control, z0, generations, size_cap, sizes)
    else:
        off_kind, par1, par2, probs, k1 = offspring_code(offspring)
        ctl_kind, g, shape = control_code(control)
        phi_last, extinct_at = k.simulate_general(
            s, off_kind, par1, par2, probs, k1, ctl_kind, g, shape, m,
            z0, generations, size_cap, sizes)
    return Trajectory(sizes=sizes, last_progenitors=int(phi_last),
                      extinct_at=None if extinct_at < 0 else int(extinct_at))


def _simulate_custom_xi(k, s, offspring, control, z0, generations, size_cap, sizes):
    # Mirrors the compiled simulate_general step for step, swapping only
    # the size map; consumes the substream in the same order.
    off_kind, par1, par2, probs, k1 = offspring_code(offspring)
    z = z0
    sizes[0] = z
    phi = 0
    extinct_at = -1
    for g_i in range(generations):
        phi = int(k.binomial_draw(s, control.xi_map(z), control.gamma)) if z > 0 else 0
        z = int(k.offspring_sum(s, off_kind, par1, par2, probs, k1, phi))
        z = min(z, size_cap)
        sizes[g_i + 1] = z
        if z == 0 and extinct_at < 0:
            extinct_at = g_i + 1
    return phi, extinct_at


def sample_offspring_sum(law: OffspringLaw, count: int, seed: int,
                         task: int = 0, size: Optional[int] = None):
    """Draw Sum_{j<=count} X_j for iid offspring X_j.

    Distributional shortcuts are exact, not approximate: a binomial sum
    collapses to one binomial draw, a geometric sum to a gamma-mixed
    Poisson, and a large finite-pmf sum to conditional binomials.  With
    `size` given, that many iid sums are drawn sequentially from the one
    substream and returned as an array.
    """
    if count < 0:
        raise ValidationError("count must be >= 0")
    off_kind, par1, par2, probs, k1 = offspring_code(law)
    k = backend.active()
    s = np.empty(4, dtype=np.uint64)
    k.stream_init(seed, _TAG_OFFSPRING_SUM, task, s)
    if size is None:
        return int(k.offspring_sum(s, off_kind, par1, par2, probs, k1, count))
    out = np.empty(size, dtype=np.int64)
    for i in range(size):
        out[i] = k.offspring_sum(s, off_kind, par1, par2, probs, k1, count)
    return out
