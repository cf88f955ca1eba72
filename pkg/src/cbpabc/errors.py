"""Exception hierarchy shared across the package.

Exit-code mapping for the CLI: ConfigError -> 1, DataError -> 2,
BudgetError -> 3. Everything raised by the library derives from CbpError so
callers can catch one base.
"""


class CbpError(Exception):
    """Base class for all package errors."""


class ConfigError(CbpError):
    """Malformed or inconsistent run configuration."""


class DataError(CbpError):
    """Invalid observations, archives, or derived quantities."""


class ParseError(DataError):
    """A file failed to parse; message carries the offending line number."""


class ValidationError(DataError):
    """Structurally valid input violating a documented invariant."""


class DomainError(DataError, ValueError):
    """Operation applied outside its mathematical domain."""


class LengthMismatch(DataError, ValueError):
    """Paired vectors of different lengths."""


class NonPositiveEntry(DataError, ValueError):
    """A vector that must be strictly positive contains a value <= 0."""


class ArchiveMismatch(DataError):
    """Archive config hash disagrees with the supplied configuration."""


class InsufficientParticles(DataError):
    """Too few particles carry the selected model index for stage 2."""


class DegenerateSample(DataError):
    """Sample with no usable spread (effective size < 2 or zero variance)."""


class SingularDesign(DataError):
    """Rank-deficient regression design (reported via a flag, not raised)."""


class ZeroVariance(DataError):
    """Observed series is constant; goodness-of-fit undefined."""


class BudgetError(CbpError):
    """Simulation budget exhausted."""


class BudgetExceeded(BudgetError):
    """Pool discard rate exceeded the configured attempt cap."""


class PriorMismatch(BudgetExceeded):
    """A growth-model prior cannot produce candidates matching the data."""


class DegenerateModelWarning(UserWarning):
    """All weights of one model group vanished; the group was dropped."""


class RegressionFallbackWarning(UserWarning):
    """Singular design: regression adjustment skipped, raw sample kept."""
