"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericalError -> 4.
"""


class RelateError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(RelateError):
    """Invalid or inconsistent configuration."""


class DataError(RelateError):
    """Broken, missing, or incompatible data artifacts."""


class NumericalError(RelateError):
    """A numerical procedure failed (divergence, impossible decomposition)."""


class TrainingDivergedError(NumericalError):
    """Parameters became non-finite during training."""


class DegenerateDataWarning(UserWarning):
    """Data contains degenerate items (e.g. constant patches that normalize to zero)."""


class NotWhitenedWarning(UserWarning):
    """Input data does not look whitened."""


class NotNormalizedWarning(UserWarning):
    """Input images do not look contrast-normalized."""
