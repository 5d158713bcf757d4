"""Exception hierarchy with CLI exit-code mapping.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric/convergence error.
"""


class EegriskError(Exception):
    """Base for all pipeline errors."""

    exit_code = 1


class ConfigError(EegriskError):
    """Invalid configuration, parameters, or CLI usage."""

    exit_code = 2


class ParameterError(ConfigError):
    """Operation parameter outside its documented range."""


class DataError(EegriskError):
    """Malformed, inconsistent, or degenerate input data."""

    exit_code = 3


class SchemaError(DataError):
    """File does not conform to the documented schema."""


class ParseError(DataError):
    """A cell or line could not be parsed."""


class IntegrityError(DataError):
    """Cross-record consistency violated (duplicate ids, bad partition)."""


class ValidationError(DataError):
    """Value-level invariant violated (non-finite, out of range)."""


class TruncationError(DataError):
    """Binary payload shorter or longer than the declared shape."""


class RosterError(DataError):
    """Record references a site absent from a fitted model."""


class EmptyInputError(DataError):
    """Operation requires a nonempty input."""


class SplitError(DataError):
    """A class is too small to split as requested."""


class LabelError(DataError):
    """Predictions contain labels unseen in the reference set."""


class SupportError(DataError):
    """Propensity-score common support is empty."""


class NumericError(EegriskError):
    """Numerical failure: non-convergence or undefined ratio."""

    exit_code = 4


class ConvergenceError(NumericError):
    """Iterative solver failed to converge; carries an iteration trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class SeparationError(NumericError):
    """Logistic fit diverged (perfect separation)."""


class UndefinedRatioError(NumericError):
    """A ratio with zero denominator (zero power, zero variance)."""


class UndefinedEffectError(NumericError):
    """Effect size undefined (zero pooled SD)."""


class UndefinedAucError(NumericError):
    """AUC undefined (single-class labels)."""


class SelectionError(NumericError):
    """Feature selection produced an empty set."""
