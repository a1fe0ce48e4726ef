"""Loss-rank hard example mining on a minimal single-shot grid detector.

The package trains a tiny fully differentiable detector on synthetic
shape images and, at each step, keeps only the top-K highest-loss
predictions (after a loss-ordered deduplication pass) so that gradient
updates concentrate on hard examples instead of the easy background
majority.
"""

from .errors import (
    ConfigError,
    ContractViolation,
    DatasetError,
    NonFiniteGradientError,
    TrainingAborted,
)

__all__ = [
    "ConfigError",
    "ContractViolation",
    "DatasetError",
    "NonFiniteGradientError",
    "TrainingAborted",
]

__version__ = "0.1.0"
