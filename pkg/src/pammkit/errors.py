"""Exceptions raised across the package.

Everything user-facing derives from :class:`PammError` so callers (and the
CLI) can distinguish bad input from internal failures.
"""


class PammError(Exception):
    """Base class for all errors caused by invalid input or unusable data."""


class FormulaSyntaxError(PammError):
    """Raised when a formula string cannot be parsed.

    Parameters
    ----------
    message : str
        Human-readable description.
    position : int
        0-based character offset into the source string where the offending
        token starts (``len(source)`` for unexpected end of input).
    expected : str, optional
        Description of what the parser expected at that point.
    """

    def __init__(self, message, position, expected=None):
        self.position = position
        self.expected = expected
        detail = f"{message} at position {position}"
        if expected is not None:
            detail += f" (expected {expected})"
        super().__init__(detail)


class UnknownSpecialError(FormulaSyntaxError):
    """The right-hand side names a special other than concurrent/cumulative."""


class UnknownFunctionError(FormulaSyntaxError):
    """A hazard expression calls a function the evaluator does not know."""


class DuplicateTzVarError(FormulaSyntaxError):
    """Two special terms claim the same exposure time variable."""


class UnknownColumnError(PammError):
    """A formula or option names a column that the data does not contain."""


class NonPositiveTimeError(PammError):
    """A survival time is not strictly greater than the first cut point."""


class NoEventsError(PammError):
    """No events are available (all-censored data, or an all-zero response)."""


class MissingBaselineExposureError(PammError):
    """A subject has no concurrent exposure at or before its first interval."""

    def __init__(self, subject_id):
        self.subject_id = subject_id
        super().__init__(
            f"subject {subject_id!r} has no exposure measurement at or before "
            "the start of follow-up"
        )


class MissingExposureSeriesError(PammError):
    """A subject in the survival data has no rows in an exposure table."""

    def __init__(self, subject_id, tz_var):
        self.subject_id = subject_id
        self.tz_var = tz_var
        super().__init__(
            f"subject {subject_id!r} has no exposure series for {tz_var!r}"
        )


class RaggedExposureGridError(PammError):
    """Exposure measurement grids differ between subjects."""


class DegenerateDataError(PammError):
    """Too little variation in a covariate to build the requested basis."""


class ShapeMismatchError(PammError):
    """Matrix columns that must align row-for-row or entry-for-entry do not."""


class MixedScalarMatrixTermError(PammError):
    """A model term mixes scalar and matrix columns."""


class UnresolvedTermError(PammError):
    """A model term references a column absent from the data."""


class NoPenaltyError(PammError):
    """Smoothing-parameter selection was asked for a model without penalties."""


class RankDeficientError(PammError):
    """The penalized normal matrix is singular beyond numerical repair."""


class DivergedError(PammError):
    """The fitting iteration failed to converge."""


class NotPositiveDefiniteError(PammError):
    """A covariance matrix has no valid symmetric factorization."""


class TendNotOnGridError(PammError):
    """A requested interval end point is not one of the training cut points."""


class UnorderedIntervalsError(PammError):
    """Rows are not ordered by interval end point within a group."""


class NotABundleError(PammError):
    """A path does not contain a readable piece-wise exponential data bundle."""
