"""Stage-2 machinery: selection, regression adjustment, KDE, HPD."""

import math

import numpy as np
import pytest

from cbpabc.distance import rho, summary
from cbpabc.errors import (
    ConfigError,
    DegenerateSample,
    DomainError,
    InsufficientParticles,
    RegressionFallbackWarning,
)
from cbpabc.laws import DensityControl, ObservedSample, success_probability
from cbpabc.refine import (
    AdjustedSample,
    DensityEstimate,
    Particle,
    SelectedSet,
    derived_posteriors,
    equilibrium,
    hpd,
    kde,
    kde2d,
    regression_adjust,
    select_and_reject,
)
from cbpabc.smc import ParticleSet

OBSERVED = ObservedSample(sizes=(10, 12, 15, 18, 22), last_progenitors=16)


def synthetic_pset(n3=60, n2=10, seed=5):
    """A hand-built population: n2 particles at kappa=2, n3 at kappa=3."""
    rng = np.random.default_rng(seed)
    n = n2 + n3
    kappa = np.array([2] * n2 + [3] * n3, dtype=np.int64)
    probs = np.zeros((n, 4))
    for i in range(n):
        k1 = kappa[i] + 1
        row = rng.dirichlet(np.ones(k1))
        probs[i, :k1] = row
    sizes = rng.integers(5, 40, size=(n, 5)).astype(np.int64)
    sizes[:, 0] = 10
    return ParticleSet(
        t=2, epsilon=1.0, kappa=kappa, probs=probs,
        gamma=rng.uniform(0.5, 0.9, n),
        weight=np.full(n, 1.0 / n), distance=rng.uniform(0.1, 1.0, n),
        sizes=sizes, phi=rng.integers(5, 40, size=n).astype(np.int64),
        task_index=np.arange(n, dtype=np.int64))


def test_select_filters_by_kappa():
    pset = synthetic_pset()
    sel = select_and_reject(pset, OBSERVED, kappa_hat=3, keep_fraction=1.0)
    assert len(sel) == 60
    assert all(p.kappa == 3 for p in sel)
    # keep_fraction = 1 is the identity filter on the kappa subset
    assert sorted(sel.task_index) == list(range(10, 70))


def test_select_keep_best_ordering():
    pset = synthetic_pset()
    sel = select_and_reject(pset, OBSERVED, kappa_hat=3, keep_fraction=0.2)
    assert len(sel) == 12           # ceil(0.2 * 60)
    obs_vec = summary(OBSERVED).as_vector()
    all_d = {}
    for i in range(10, 70):
        part = pset.row(i)
        all_d[i] = rho(summary(part.trajectory, like=OBSERVED).as_vector(),
                       obs_vec)
    kept = set(sel.task_index.tolist())
    discarded = set(all_d) - kept
    assert max(all_d[i] for i in kept) <= min(all_d[i] for i in discarded)
    assert sel.epsilon2 == pytest.approx(max(all_d[i] for i in kept))
    np.testing.assert_allclose(sorted(sel.rho), sorted(all_d[i] for i in kept))


def test_select_insufficient_particles():
    pset = synthetic_pset(n3=30, n2=40)
    with pytest.raises(InsufficientParticles):
        select_and_reject(pset, OBSERVED, kappa_hat=3)
    with pytest.raises(ConfigError):
        select_and_reject(pset, OBSERVED, kappa_hat=2, keep_fraction=0.0)


def _selected_from(probs, gamma, summaries, obs, rho_vals):
    particles = tuple(
        Particle(kappa=probs.shape[1] - 1, probs=tuple(p), gamma=float(g),
                 weight=1.0, distance=float(d))
        for p, g, d in zip(probs, gamma, rho_vals))
    return SelectedSet(kappa_hat=probs.shape[1] - 1, particles=particles,
                       summaries=summaries, rho=np.asarray(rho_vals),
                       epsilon2=float(np.max(rho_vals)),
                       observed_summary=np.asarray(obs, dtype=np.float64),
                       task_index=np.arange(len(particles), dtype=np.int64))


def test_regression_planted_linear_model():
    """Parameters generated by an exact linear link plus tiny noise are
    pulled back to the constant."""
    rng = np.random.default_rng(42)
    n, dim = 400, 4
    obs = np.array([1200.0, 1.2, 0.8, 1.6])
    x = rng.normal(0.0, 1.0, size=(n, dim)) * np.array([40.0, 0.05, 0.04, 0.08])
    c_p = np.array([0.1, 0.2, 0.3, 0.4])
    c_g = 0.6
    b_p = rng.normal(0.0, 1.0, size=(dim, 4)) * 1e-3
    b_g = rng.normal(0.0, 1.0, size=dim) * 1e-3
    probs = c_p + x @ b_p + rng.normal(0.0, 1e-6, size=(n, 4))
    gamma = c_g + x @ b_g + rng.normal(0.0, 1e-6, size=n)
    adj = regression_adjust(
        _selected_from(probs, gamma, obs + x, obs, rng.uniform(0.1, 1.0, n)))
    assert adj.rejected_count == 0
    assert adj.fallback_no_adjustment is False
    assert adj.renormalized is True
    np.testing.assert_allclose(adj.probs, np.broadcast_to(c_p, adj.probs.shape),
                               atol=1e-4)
    np.testing.assert_allclose(adj.gamma, c_g, atol=1e-4)
    np.testing.assert_allclose(adj.probs.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(adj.tau_m, adj.gamma * adj.m, atol=1e-12)


def test_regression_zero_regressors_is_identity():
    rng = np.random.default_rng(7)
    n = 30
    probs = rng.dirichlet(np.ones(4), size=n)
    gamma = rng.uniform(0.4, 0.8, n)
    obs = np.array([1200.0, 1.2, 0.8, 1.6])
    sel = _selected_from(probs, gamma, np.tile(obs, (n, 1)), obs,
                         np.zeros(n))
    adj = regression_adjust(sel)
    np.testing.assert_array_equal(adj.probs, probs)
    np.testing.assert_array_equal(adj.gamma, gamma)
    np.testing.assert_array_equal(adj.weight, np.ones(n))
    assert adj.fallback_no_adjustment is False
    assert adj.renormalized is False


def test_regression_drops_negative_rows():
    """A row pushed to a negative coordinate is removed and counted."""
    lin_x = np.linspace(-1.0, 1.0, 10)
    b = 0.05
    x = np.append(lin_x, 0.0)[:, None]           # deviant row at x = 0
    probs = np.column_stack([
        0.3 + b * x[:, 0], 0.3 - b * x[:, 0],
        np.full(11, 0.2), np.full(11, 0.2)])
    probs[10, 0] = -0.1       # adjusted value at x=0 equals the raw value
    gamma = np.full(11, 0.6)
    obs = np.array([100.0])
    adj = regression_adjust(
        _selected_from(probs, gamma, obs + x, obs, np.linspace(0.05, 0.45, 11)))
    assert adj.rejected_count == 1
    assert adj.n == 10
    np.testing.assert_allclose(adj.probs.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(adj.probs >= 0.0)


def test_regression_gamma_domain_guard():
    rng = np.random.default_rng(3)
    n = 40
    x = rng.normal(size=(n, 2))
    probs = np.tile([0.25, 0.25, 0.25, 0.25], (n, 1)) + 0.0 * x[:, :1]
    gamma = np.full(n, 0.6)
    gamma[5] = 4.0            # plant a row far outside the prior support
    x[5] = 0.0
    obs = np.array([10.0, 1.5])
    adj = regression_adjust(
        _selected_from(probs, gamma, obs + x, obs, rng.uniform(0.2, 1.0, n)),
        gamma_support=(0.0, 1.0))
    assert adj.rejected_count >= 1
    assert np.all((adj.gamma >= 0.0) & (adj.gamma <= 1.0))


def test_regression_fallback_when_all_rows_rejected():
    """If the domain filter would empty the sample, the unadjusted rows
    come back instead, flagged."""
    rng = np.random.default_rng(9)
    n = 25
    x = rng.normal(size=(n, 2))
    probs = rng.dirichlet(np.ones(3), size=n)
    gamma = np.full(n, 4.0)          # far outside the support below
    obs = np.array([10.0, 1.5])
    sel = _selected_from(probs, gamma, obs + x, obs, rng.uniform(0.2, 1.0, n))
    with pytest.warns(RegressionFallbackWarning):
        adj = regression_adjust(sel, gamma_support=(0.0, 1.0))
    assert adj.fallback_no_adjustment is True
    assert adj.rejected_count == 0
    assert adj.n == n
    np.testing.assert_array_equal(adj.gamma, gamma)


def test_regression_singular_design_falls_back():
    n = 20
    probs = np.tile([0.3, 0.3, 0.2, 0.2], (n, 1))
    gamma = np.linspace(0.5, 0.7, n)
    obs = np.array([100.0, 1.5])
    # every summary equals the same off-observed point: rank-deficient
    summaries = np.tile(obs + np.array([5.0, 0.1]), (n, 1))
    sel = _selected_from(probs, gamma, summaries, obs,
                         np.linspace(0.1, 0.5, n))
    with pytest.warns(RegressionFallbackWarning):
        adj = regression_adjust(sel)
    assert adj.fallback_no_adjustment is True
    np.testing.assert_array_equal(adj.gamma, gamma)


def test_regression_needs_enough_rows():
    probs = np.tile([0.5, 0.3, 0.2], (3, 1))
    gamma = np.full(3, 0.5)
    obs = np.array([1.0, 2.0, 3.0, 4.0])
    sel = _selected_from(probs, gamma, np.tile(obs, (3, 1)) + 0.1, obs,
                         np.full(3, 0.5))
    with pytest.raises(InsufficientParticles):
        regression_adjust(sel)


def test_kde_normal_oracle():
    rng = np.random.default_rng(11)
    est = kde(rng.standard_normal(10_000))
    at_zero = float(np.interp(0.0, est.grid, est.density))
    assert at_zero == pytest.approx(1.0 / math.sqrt(2 * math.pi), abs=0.03)
    assert 0.98 <= est.integral() <= 1.02
    assert est.bandwidth > 0.0


def test_kde_degenerate_cases():
    with pytest.raises(DegenerateSample):
        kde(np.full(10, 3.0))
    # weights concentrated on a single point
    with pytest.raises(DegenerateSample):
        kde(np.arange(5.0), weights=np.array([0.0, 0.0, 1.0, 0.0, 0.0]))
    with pytest.raises(DegenerateSample):
        kde(np.array([1.0, 1.0, 2.0]), weights=np.array([1.0, 1.0, 0.0]))


def test_kde_weighted_mean_consistency():
    rng = np.random.default_rng(23)
    vals = rng.exponential(2.0, size=4000)
    w = rng.uniform(0.0, 1.0, size=4000)
    est = kde(vals, w)
    direct = float((w / w.sum()) @ vals)
    sd = math.sqrt(float((w / w.sum()) @ (vals - direct) ** 2))
    assert est.mean() == pytest.approx(direct, abs=0.02 * sd)


def test_kde_integral_random_weights():
    rng = np.random.default_rng(29)
    for _ in range(5):
        est = kde(rng.normal(3.0, 0.5, 300), rng.uniform(0.1, 1.0, 300))
        assert 0.98 <= est.integral() <= 1.02


def test_kde2d_normalization_and_mean():
    rng = np.random.default_rng(37)
    x = rng.normal(2.0, 0.7, 2000)
    y = rng.normal(-1.0, 0.3, 2000)
    grid = kde2d(x, y, grid_size=80)
    total = np.trapezoid(np.trapezoid(grid.density, grid.y_grid, axis=1),
                         grid.x_grid)
    assert total == pytest.approx(1.0, abs=0.03)
    marg_x = np.trapezoid(grid.density, grid.y_grid, axis=1)
    mean_x = np.trapezoid(grid.x_grid * marg_x, grid.x_grid)
    assert mean_x == pytest.approx(x.mean(), abs=0.02 * x.std())


def _triangular() -> DensityEstimate:
    grid = np.linspace(0.0, 2.0, 401)
    return DensityEstimate(grid=grid, density=1.0 - np.abs(grid - 1.0),
                           bandwidth=0.1)


def test_hpd_triangular_symmetry():
    box = hpd(_triangular(), level=0.95)
    assert box.lo + box.hi == pytest.approx(2.0, abs=0.02)
    assert box.lo < 1.0 < box.hi
    assert not box.disconnected


def test_hpd_level_to_one_covers_support():
    box = hpd(_triangular(), level=0.999)
    assert box.lo < 0.1
    assert box.hi > 1.9


def test_hpd_normal_quantiles():
    rng = np.random.default_rng(17)
    est = kde(rng.standard_normal(20_000))
    box = hpd(est, level=0.95)
    assert box.lo == pytest.approx(-1.96, abs=0.1)
    assert box.hi == pytest.approx(1.96, abs=0.1)
    # mass inside the interval honors the level
    inside = (est.grid >= box.lo) & (est.grid <= box.hi)
    mass = est.density[inside].sum() / est.density.sum()
    assert mass >= 0.95 - 0.01


def test_hpd_flags_disconnected_mass():
    grid = np.linspace(-6.0, 6.0, 601)
    bumps = np.exp(-0.5 * (grid + 3.0) ** 2) + np.exp(-0.5 * (grid - 3.0) ** 2)
    est = DensityEstimate(grid=grid, density=bumps, bandwidth=1.0)
    box = hpd(est, level=0.5)
    assert box.disconnected
    assert box.lo < -2.0 and box.hi > 2.0


def test_hpd_level_validation():
    with pytest.raises(ConfigError):
        hpd(_triangular(), level=1.0)


def test_equilibrium_reference_values():
    assert equilibrium("verhulst", 2.0, 1000.0) == pytest.approx(500.0)
    for m in (1.3, 2.7):
        assert equilibrium("hassell", m, 750.0, shape=1.0) == pytest.approx(750.0)
    assert equilibrium("theta-logistic", 1.8, 420.0, shape=2.0) == pytest.approx(420.0)
    assert equilibrium("gompertz", 3.1, 9000.0) == pytest.approx(9000.0)
    with pytest.raises(DomainError):
        equilibrium("verhulst", 1.0, 1000.0)


def test_equilibrium_fixed_point_property():
    """m * K_e * s(m, K_e, K) = K_e across random configurations."""
    rng = np.random.default_rng(101)
    for _ in range(200):
        family = rng.choice(["verhulst", "theta-logistic", "hassell",
                             "gompertz"])
        m = float(rng.uniform(1.05, 6.0))
        cap = float(rng.uniform(10.0, 1e5))
        shape = None
        if family == "theta-logistic":
            shape = float(rng.uniform(0.2, 4.0))
        elif family == "hassell":
            shape = float(rng.uniform(0.1, 3.0))
        ke = equilibrium(family, m, cap, shape=shape)
        s = success_probability(
            DensityControl(family=family, capacity=cap, shape=shape), m, ke)
        assert m * ke * s == pytest.approx(ke, rel=1e-9)


def _adjusted_binxi(seed=13, n=300) -> AdjustedSample:
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet((2.0, 3.0, 4.0, 3.0), size=n)
    gamma = rng.uniform(0.55, 0.85, n)
    m = probs @ np.arange(4.0)
    return AdjustedSample(probs=probs, gamma=gamma, m=m, tau_m=gamma * m,
                          weight=rng.uniform(0.1, 1.0, n), rejected_count=0,
                          control_family="binomial-xi")


def test_derived_posteriors_binomial_xi():
    adj = _adjusted_binxi()
    post = derived_posteriors(adj)
    assert set(post.marginals) == {"m", "gamma", "tau_m"}
    wn = adj.weight / adj.weight.sum()
    assert post.marginals["m"].mean == pytest.approx(float(wn @ adj.m))
    assert post.marginals["tau_m"].mean == pytest.approx(float(wn @ adj.tau_m))
    for s in post.marginals.values():
        assert 0.98 <= s.density.integral() <= 1.02
        assert s.interval.lo < s.mean < s.interval.hi
    assert post.joint.density.shape == (64, 64)


def test_derived_posteriors_density_family():
    rng = np.random.default_rng(31)
    n = 200
    probs = rng.dirichlet((1.0, 2.0, 5.0, 4.0), size=n)
    m = probs @ np.arange(4.0)
    assert np.all(m > 1.0)
    cap = rng.uniform(60.0, 100.0, n)
    adj = AdjustedSample(probs=probs, gamma=cap, m=m,
                         tau_m=np.full(n, np.nan),
                         weight=np.ones(n), rejected_count=0,
                         control_family="verhulst")
    post = derived_posteriors(adj)
    assert set(post.marginals) == {"m", "gamma", "K_e"}
    want = float(np.mean((1.0 - 1.0 / m) * cap))
    assert post.marginals["K_e"].mean == pytest.approx(want)
