"""Exception hierarchy shared by all covxplain modules."""


class CovxplainError(Exception):
    """Base class for all errors raised by covxplain."""


class DimensionError(CovxplainError, ValueError):
    """Array shapes do not line up with the model or with each other."""


class NumericalError(CovxplainError, ArithmeticError):
    """A computation produced NaN/inf or diverged."""


class ConfigError(CovxplainError, ValueError):
    """Invalid parameter or unsupported method/backend combination."""


class DataError(CovxplainError, ValueError):
    """Malformed input data (unparseable CSV cell, missing column, ...)."""
