"""Exception taxonomy shared across the package."""


class PipeshiftError(Exception):
    """Base class for all package errors."""


class DataIntegrityError(PipeshiftError, ValueError):
    """Raised when input data is corrupt (non-finite values, bad files, hash mismatch)."""


class ContractError(PipeshiftError, ValueError):
    """Raised when a caller violates a documented precondition."""


class StageError(PipeshiftError, RuntimeError):
    """Raised when a shift stage fails internally (e.g. codec failure).

    Search layers catch this and discard the trial instead of aborting.
    """


class ScorerError(PipeshiftError, RuntimeError):
    """Raised when an external scorer endpoint fails past its retry budget."""


class ConfigError(PipeshiftError, ValueError):
    """Raised for invalid campaign or repair configuration."""


class TrainingError(PipeshiftError, RuntimeError):
    """Raised when adapter training diverges past its learning-rate halving budget."""
