"""Exceptions raised by imblab.

Each exception also derives from the closest builtin, so callers can catch
either the imblab class or the builtin one.
"""


class ImblabError(Exception):
    """Base class for all imblab errors."""


class InfeasibleCountsError(ImblabError, ValueError):
    """Sample counts cannot satisfy the requested class frequencies."""


class InfeasiblePartitionError(ImblabError, ValueError):
    """Classes cannot be split into the requested number of groups."""


class ShapeMismatchError(ImblabError, ValueError):
    """Model and dataset dimensions disagree."""


class NumericError(ImblabError, ArithmeticError):
    """A computation produced non-finite values."""


class LambertDomainError(ImblabError, ValueError):
    """Argument outside the domain of the principal Lambert W branch."""


class EmptyClassError(ImblabError, ValueError):
    """A class without samples where every class must be populated."""


class UndefinedCorrelationError(ImblabError, ValueError):
    """Correlation requested on data with zero variance."""


class SubsetTooSmallError(ImblabError, ValueError):
    """Too few classes left after applying a subset rule."""


class NoViableStepSizeError(ImblabError, RuntimeError):
    """Every step size of a grid search diverged."""


class ConfigError(ImblabError, ValueError):
    """Invalid experiment configuration.

    Parameters
    ----------
    field : str
        dotted path of the offending field, e.g. ``optimizers[0].family``
    message : str
        what is wrong with it

    """

    def __init__(self, field: str, message: str) -> None:
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")
