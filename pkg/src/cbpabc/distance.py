"""Discrepancy metric, summary statistics, and tolerance schedules.

The metric compares coordinate-wise ratios rather than differences:

    rho(x, y) = sqrt( sum_i (x_i/y_i - y_i/x_i)^2 )

so it is symmetric, zero exactly on equal vectors, and invariant under a
common rescaling of both sides.  It needs strictly positive entries;
when trajectories are screened in bulk the pool runner encodes an
incomparable pair (a zero where the observation is positive) as +inf
instead of raising, which no finite tolerance ever accepts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .errors import LengthMismatch, NonPositiveEntry, ValidationError
from .laws import ObservedSample, Trajectory


def rho(x, y) -> float:
    """Relative-ratio distance between two strictly positive vectors."""
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.shape != yv.shape or xv.ndim != 1:
        raise LengthMismatch(f"vectors of shape {xv.shape} and {yv.shape}")
    if xv.size == 0:
        raise ValidationError("empty discrepancy vectors")
    if np.any(xv <= 0.0) or np.any(yv <= 0.0):
        raise NonPositiveEntry("discrepancy coordinates must be > 0")
    r = xv / yv
    return float(math.sqrt(np.sum((r - 1.0 / r) ** 2)))


def raw_vector(sample: Union[ObservedSample, Trajectory],
               like: Optional[ObservedSample] = None) -> np.ndarray:
    """Comparison coordinates of a sample: masked sizes plus the final
    progenitor count when it is part of the observation.

    Passing `like` imposes that sample's observation mask, which is how a
    simulated trajectory is laid out against gapped real data.
    """
    if like is not None:
        idx = like.observed_indices()
        want_phi = like.has_phi
        if isinstance(sample, ObservedSample):
            values = [sample.sizes[i] for i in idx]
            if any(v is None for v in values):
                raise ValidationError("sample is missing a coordinate the mask requires")
            out = np.array(values, dtype=np.float64)
        else:
            if idx[-1] > sample.generations:
                raise LengthMismatch("trajectory shorter than the observation mask")
            out = sample.sizes[idx].astype(np.float64)
        if want_phi:
            if sample.last_progenitors is None:
                raise ValidationError("mask requires a progenitor count")
            out = np.append(out, float(sample.last_progenitors))
        return out
    if isinstance(sample, ObservedSample):
        return raw_vector(sample, like=sample)
    out = sample.sizes.astype(np.float64)
    if sample.last_progenitors is not None:
        out = np.append(out, float(sample.last_progenitors))
    return out


def pair_distance(trajectory: Trajectory, observed: ObservedSample) -> float:
    """rho between a trajectory and an observation under the latter's
    mask; +inf when any paired coordinate is nonpositive."""
    obs = raw_vector(observed)
    sim = raw_vector(trajectory, like=observed)
    if np.any(sim <= 0.0) or np.any(obs <= 0.0):
        return math.inf
    r = sim / obs
    return float(math.sqrt(np.sum((r - 1.0 / r) ** 2)))


@dataclass(frozen=True)
class SummaryStatistic:
    """Four-coordinate trajectory compression.

    total          : sum of Z_1..Z_n over usable generations
    growth_ratio   : total / (same sum shifted one generation back)
    progenitor_fraction : phi_{n-1} / Z_{n-1}   (None when phi unobserved)
    mean_ratio     : Z_n / phi_{n-1}            (None when phi unobserved)

    On a surviving supercritical path the last three converge to the
    threshold product, the asymptotic progenitor fraction, and the
    offspring mean, which is what makes this a sharp statistic for the
    second inference stage.
    """

    total: float
    growth_ratio: float
    progenitor_fraction: Optional[float] = None
    mean_ratio: Optional[float] = None

    @property
    def reduced(self) -> bool:
        return self.progenitor_fraction is None

    def as_vector(self) -> np.ndarray:
        if self.reduced:
            return np.array([self.total, self.growth_ratio])
        return np.array([self.total, self.growth_ratio,
                         self.progenitor_fraction, self.mean_ratio])


def summary(sample: Union[ObservedSample, Trajectory],
            like: Optional[ObservedSample] = None) -> SummaryStatistic:
    """Summary statistic of a sample, reduced to the first two
    coordinates when the progenitor count is not observed.

    With gapped observations (or a `like` mask carrying gaps) the two
    sums run over generation pairs (i-1, i) that are both recorded, so
    observed and simulated sides always aggregate identical windows.
    """
    if isinstance(sample, ObservedSample):
        mask_src = sample if like is None else like
        sizes = [sample.sizes[i] if i < len(sample.sizes) else None
                 for i in range(mask_src.generations + 1)]
        phi = sample.last_progenitors
    else:
        mask_src = like
        sizes = list(sample.sizes)
        phi = sample.last_progenitors
    if mask_src is not None:
        recorded = set(mask_src.observed_indices().tolist())
        use_phi = mask_src.has_phi
        sizes = [v if i in recorded else None for i, v in enumerate(sizes)]
    else:
        use_phi = phi is not None

    num = den = 0.0
    pairs = 0
    for i in range(1, len(sizes)):
        if sizes[i] is None or sizes[i - 1] is None:
            continue
        num += sizes[i]
        den += sizes[i - 1]
        pairs += 1
    if pairs == 0 or den == 0.0:
        raise ZeroDivisionError("no usable generation pairs with positive sizes")

    if not use_phi:
        return SummaryStatistic(total=num, growth_ratio=num / den)
    if phi is None:
        raise ValidationError("progenitor count required for the full summary")
    z_prev, z_last = sizes[-2], sizes[-1]
    if z_prev is None or z_last is None:
        raise ValidationError("full summary needs the last two generations recorded")
    if z_prev == 0 or phi == 0:
        raise ZeroDivisionError("degenerate path: no progenitors in the last step")
    return SummaryStatistic(total=num, growth_ratio=num / den,
                            progenitor_fraction=phi / z_prev,
                            mean_ratio=z_last / phi)


@dataclass(frozen=True)
class ToleranceSchedule:
    """Per-iteration pool sizes and the quantile orders they realize.

    The tolerance at iteration t is realized by keeping the best N out
    of pool_sizes[t] comparable simulations, which is the quantile of
    order N / pool_sizes[t]; orders must therefore decrease strictly.
    """

    pool_sizes: Tuple[int, ...]
    quantile_orders: Tuple[float, ...]

    def __post_init__(self) -> None:
        pools = tuple(int(p) for p in self.pool_sizes)
        orders = tuple(float(q) for q in self.quantile_orders)
        object.__setattr__(self, "pool_sizes", pools)
        object.__setattr__(self, "quantile_orders", orders)
        if len(pools) != len(orders) or not pools:
            raise ValidationError("schedule needs matching, non-empty pools and orders")
        if any(p < 1 for p in pools):
            raise ValidationError("pool sizes must be >= 1")
        if any(not 0.0 < q < 1.0 for q in orders):
            raise ValidationError("quantile orders must lie in (0, 1)")
        if any(b >= a for a, b in zip(orders, orders[1:])):
            raise ValidationError("quantile orders must decrease strictly")
        keeps = {round(p * q) for p, q in zip(pools, orders)}
        if len(keeps) != 1:
            raise ValidationError("pool * order must give one particle count "
                                  f"across iterations, got {sorted(keeps)}")
        if min(keeps) < 1:
            raise ValidationError("particle count must be >= 1")

    @classmethod
    def from_pools(cls, pool_sizes, particles: int) -> "ToleranceSchedule":
        pools = tuple(int(p) for p in pool_sizes)
        if particles < 1 or any(p < particles for p in pools):
            raise ValidationError("each pool must be at least the particle count")
        return cls(pools, tuple(particles / p for p in pools))

    @property
    def particles(self) -> int:
        return round(self.pool_sizes[0] * self.quantile_orders[0])

    @property
    def iterations(self) -> int:
        return len(self.pool_sizes)
