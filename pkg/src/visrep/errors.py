"""Exception taxonomy shared by all modules."""


class VisRepError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VisRepError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(VisRepError):
    """A configuration value or combination is invalid."""


class ContractError(VisRepError):
    """An API precondition was violated by the caller."""


class LabelError(VisRepError):
    """A class label is outside the valid range for its task."""


class FormatError(VisRepError):
    """A file does not match its declared format (bad magic, malformed header)."""


class TruncatedError(VisRepError):
    """A file ended before its header-declared payload was complete."""


class ParseError(VisRepError):
    """A text record (manifest row, config line) could not be parsed."""


class CapabilityError(VisRepError):
    """The model lacks the capability the operation needs (e.g. attention)."""


class NumericalAbort(VisRepError):
    """Training hit a non-finite loss or gradient and was stopped."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
