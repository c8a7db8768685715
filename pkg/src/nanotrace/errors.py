"""Exception hierarchy shared by all modules."""


class NanotraceError(Exception):
    """Base class for every error raised by the package."""


class SchemaError(NanotraceError):
    """A required column is missing or the column mapping is malformed."""


class ParseError(NanotraceError):
    """A data cell could not be converted."""


class DesignError(NanotraceError):
    """The dataset violates the nested design or a method's preconditions."""


class NestingError(DesignError):
    """A label is attached to more than one parent group."""


class UnbalancedDesignError(DesignError):
    """A balanced-design method was called on an unbalanced design."""


class DegenerateFactorError(DesignError):
    """A fixed factor has a single level, so no contrast exists."""


class AliasingError(DesignError):
    """Columns of the fixed-effects design are linearly dependent."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class ConvergenceError(NanotraceError):
    """The optimizer hit its iteration cap. ``state`` holds the best point found."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class DiagnosticsError(NanotraceError):
    """MCMC diagnostics failed where passing diagnostics are required."""


class InsufficientDataError(NanotraceError):
    """Too few points for the requested regression."""


class SingularDesignError(NanotraceError):
    """Regression design matrix is rank deficient."""
