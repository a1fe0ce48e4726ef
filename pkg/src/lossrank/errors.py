"""Exception types shared across the package."""


class ContractViolation(Exception):
    """An internal invariant was broken (bad shapes, non-binary mask, ...)."""


class DatasetError(Exception):
    """Raised when dataset files are missing, malformed, or impossible to generate."""


class ConfigError(Exception):
    """Raised for unknown keys, bad values, or malformed run-config files."""


class NonFiniteGradientError(Exception):
    """Raised when a gradient contains NaN or infinity."""


class TrainingAborted(Exception):
    """Raised when a training run diverges and cannot continue.

    Carries the iteration index at which the failure was detected.
    """

    def __init__(self, iteration: int, reason: str):
        super().__init__(f"training aborted at iteration {iteration}: {reason}")
        self.iteration = iteration
        self.reason = reason
