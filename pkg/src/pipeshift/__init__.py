"""Constrained pipeline-shift attack synthesis, archiving, and repair."""

from .errors import (
    ConfigError,
    ContractError,
    DataIntegrityError,
    PipeshiftError,
    ScorerError,
    StageError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataIntegrityError",
    "PipeshiftError",
    "ScorerError",
    "StageError",
    "TrainingError",
    "__version__",
]
