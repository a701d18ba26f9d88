"""Exception types. The CLI maps each family to its own exit code."""


class FGPError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FGPError):
    pass


class DataError(FGPError):
    pass


class ShapeError(FGPError, ValueError):
    pass


class NumericError(FGPError, FloatingPointError):
    """Non-finite values or a diverging optimisation."""


class TapeError(FGPError, ValueError):
    """Misuse of the gradient tape (bad seed, foreign node, ...)."""


class CheckpointError(FGPError):
    pass


class PlanError(FGPError, ValueError):
    """Invalid retention plan or dependency map."""
