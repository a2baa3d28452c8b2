"""Exception types shared across the package."""


class PrefOptError(Exception):
    """Base class for all errors raised by prefopt."""


class InvalidInputError(PrefOptError, ValueError):
    pass


class CapacityError(PrefOptError):
    """The requested enumeration exceeds the configured cap."""


class NumericError(PrefOptError, ArithmeticError):
    pass


class ZeroProbabilityError(NumericError, ZeroDivisionError):
    """A reference probability that must be positive is zero."""


class SupportError(PrefOptError, ValueError):
    def __init__(self, message, offending=()):
        super().__init__(message)
        self.offending = list(offending)


class GenerationError(PrefOptError):
    pass


class TrainingError(PrefOptError):
    """Training aborted. Carries the failing step and the last finite parameters."""

    def __init__(self, message, step, last_good_params=None):
        super().__init__(message)
        self.step = step
        self.last_good_params = last_good_params


class ConfigError(PrefOptError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
