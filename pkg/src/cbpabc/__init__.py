"""Simulation and likelihood-free inference for controlled branching
processes: offspring and control laws, a two-stage ABC pipeline (model
choice over the offspring support, then regression-adjusted posterior
refinement), and a grid search over density-dependent growth families.
"""

from .archive import LoadedArchive, load_archive, save_archive
from .config import RunConfig, load_config, parse_config
from .datasets import (
    FIXTURES,
    config_fixture_path,
    fixture_path,
    load_fixture,
    load_observations,
    parse_observations,
)
from .distance import (
    SummaryStatistic,
    ToleranceSchedule,
    pair_distance,
    rho,
    summary,
)
from .errors import (
    ArchiveMismatch,
    BudgetError,
    BudgetExceeded,
    CbpError,
    ConfigError,
    DataError,
    DegenerateModelWarning,
    DegenerateSample,
    DomainError,
    InsufficientParticles,
    ParseError,
    PriorMismatch,
    RegressionFallbackWarning,
    ValidationError,
    ZeroVariance,
)
from .growth import (
    FitScore,
    GrowthFitConfig,
    default_family_grid,
    fit_family,
    fit_grid,
    forecast_trajectory,
    r2g,
    select_model,
)
from .laws import (
    Binomial,
    BinomialControl,
    DensityControl,
    FinitePmf,
    Geometric,
    ObservedSample,
    Trajectory,
    simulate,
    success_probability,
)
from .refine import (
    AdjustedSample,
    DerivedPosteriors,
    HpdInterval,
    SelectedSet,
    derived_posteriors,
    equilibrium,
    hpd,
    kde,
    kde2d,
    regression_adjust,
    select_and_reject,
)
from .smc import (
    GammaPrior,
    Particle,
    ParticleSet,
    PriorSpec,
    SmcConfig,
    kappa_posterior,
    run_smc,
)

__version__ = "0.1.0"
