"""Exception hierarchy shared by all modules."""


class SgpOpgdError(Exception):
    """Base class for every error raised by this package."""


class EmptyObservations(SgpOpgdError, ValueError):
    pass


class SingularCovariance(SgpOpgdError, ArithmeticError):
    pass


class OutOfInterval(SgpOpgdError, ValueError):
    pass


class NoModel(SgpOpgdError, RuntimeError):
    pass


class DimensionMismatch(SgpOpgdError, ValueError):
    pass


class InvalidConstants(SgpOpgdError, ValueError):
    pass


class InvalidStepSize(SgpOpgdError, ValueError):
    pass


class HorizonExceeded(SgpOpgdError, IndexError):
    pass


class NotConverged(SgpOpgdError, RuntimeError):
    """Oracle solve hit its iteration cap; reported, not fatal."""


class ConfigError(SgpOpgdError, ValueError):
    pass


class SchemaError(SgpOpgdError, ValueError):
    pass


class SimulationError(SgpOpgdError, RuntimeError):
    """Wraps a module error with the controller step at which it occurred."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause
