"""Exception hierarchy.

Errors fall into three families that the CLI maps to exit codes: data/format
problems (``DataError``), numeric failures (``NumericError``) and
configuration/usage problems (``ConfigError``).
"""


class NPOSError(Exception):
    """Base class for every error raised by this package."""


class DataError(NPOSError, ValueError):
    pass


class NumericError(NPOSError, ArithmeticError):
    pass


class ConfigError(NPOSError, ValueError):
    pass


# -- data / format ---------------------------------------------------------

class BadMagic(DataError):
    pass


class VersionMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class InvalidSpec(DataError):
    pass


class MissingLabels(DataError):
    pass


class DimMismatch(DataError):
    pass


class EmptySet(DataError):
    pass


class NotEnoughNeighbors(DataError):
    """Raised when a reference set has fewer rows than a k-NN query needs."""

    def __init__(self, message, cls=None):
        super().__init__(message)
        self.cls = cls


class MTooLarge(DataError):
    pass


class IoFailure(DataError, OSError):
    pass


# -- numeric ---------------------------------------------------------------

class ZeroVector(NumericError, ValueError):
    pass


class ZeroLogitNorm(NumericError, ValueError):
    pass


class NonFiniteLoss(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass


# -- configuration ---------------------------------------------------------

class UnknownKey(ConfigError):
    pass


class BadValue(ConfigError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


# -- non-fatal signals -----------------------------------------------------

class EmptyAcceptance(UserWarning):
    """No candidate passed the rejection threshold."""
