"""Exception hierarchy shared by every module."""


class HymaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HymaError, ValueError):
    pass


class DegenerateInputError(HymaError, ValueError):
    pass


class RangeError(HymaError, IndexError):
    pass


class ArgumentError(HymaError, ValueError):
    pass


class ConfigurationError(HymaError, ValueError):
    pass


class SpecError(ConfigurationError):
    """Invalid synthetic encoder specification."""


class FormatError(HymaError, ValueError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


class TrainingDivergenceError(HymaError, FloatingPointError):
    """Non-finite loss or gradient during training.

    ``report`` carries whatever context was available (step, pair, lr, loss,
    parameter name).
    """

    def __init__(self, message, **report):
        details = ", ".join(f"{k}={v}" for k, v in report.items())
        super().__init__(f"{message} [{details}]" if details else message)
        self.report = report


class UndefinedCorrelationError(HymaError, ArithmeticError):
    pass


class AdvisorParseError(HymaError, ValueError):
    pass


class AdvisorUnavailableError(HymaError, ConnectionError):
    pass
