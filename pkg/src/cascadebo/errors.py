"""Exception types shared across the package."""


class CascadeError(Exception):
    """Base class for all errors raised by cascadebo."""


class InvalidArgument(CascadeError, ValueError):
    """Input violates a documented precondition (shape, domain, value)."""


class NumericalFailure(CascadeError, ArithmeticError):
    """A factorization or solve failed even after stabilization."""

    def __init__(self, message: str, condition: float | None = None):
        super().__init__(message)
        self.condition = condition


class EvaluatorFailure(CascadeError, RuntimeError):
    """A black-box stage evaluator returned garbage or raised."""

    def __init__(self, message: str, stage: int | None = None):
        super().__init__(message if stage is None else f"stage {stage}: {message}")
        self.stage = stage


class OptimizerFailure(CascadeError, RuntimeError):
    """Every candidate of an inner maximization failed."""


class ConsistencyViolation(CascadeError, RuntimeError):
    """Internal bookkeeping (e.g. the stock ledger) is out of sync."""


class Unsupported(CascadeError, ValueError):
    """The requested quantity is not defined for this configuration."""


class ConfigError(CascadeError, ValueError):
    """A run configuration could not be parsed or validated."""
