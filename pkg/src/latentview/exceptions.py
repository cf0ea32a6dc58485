"""Exception types. Each maps to a CLI exit code."""


class LatentViewError(Exception):
    exit_code = 1


class ConfigurationError(LatentViewError, ValueError):
    """Inconsistent or missing configuration (e.g. t_star mismatch, missing backbone)."""

    exit_code = 2


class DataError(LatentViewError):
    """Malformed dataset, cache entry or checkpoint."""

    exit_code = 3


class CheckpointError(DataError):
    pass


class NumericalError(LatentViewError, ArithmeticError):
    """Non-finite values produced during diffusion or training."""

    exit_code = 4


class NotFittedError(LatentViewError, AttributeError):
    pass
