"""Exceptions and warnings raised by the mixed model toolkit."""


class LmmError(Exception):
    """Base class of every error raised by the package."""


class SpecError(LmmError, ValueError):
    """Model definition violates a structural requirement."""


class DimensionMismatchError(SpecError):
    pass


class EmptyDesignError(SpecError):
    pass


class DegenerateModelError(SpecError):
    pass


class TableError(LmmError, ValueError):
    """Tabular input cannot be turned into a model."""


class MissingColumnError(TableError):
    """A column named by the model description is absent from the data."""

    def __init__(self, column: str) -> None:
        super().__init__(f"missing column: {column!r}")
        self.column = column


class NonNumericResponseError(TableError):
    pass


class SingleLevelFactorError(TableError):
    pass


class VarianceComponentError(LmmError, ValueError):
    """Variance components must be finite and strictly positive."""


class ContrastError(LmmError, ValueError):
    pass


class NonEstimableContrastError(ContrastError):
    pass


class RankDeficientContrastError(ContrastError):
    pass


class ContrastShapeError(ContrastError):
    pass


class SingularSystemError(LmmError, ArithmeticError):
    """The mixed model equations have no consistent solution."""


class InconsistentInverseError(LmmError, ArithmeticError):
    pass


class RouteDisagreementError(LmmError, ArithmeticError):
    """Two algebraically equal evaluations of the same matrix disagree."""


class NonPsdMseError(LmmError, ArithmeticError):
    pass


class SingularMseError(LmmError, ArithmeticError):
    pass


class DfUndefinedError(LmmError, ArithmeticError):
    """Degrees of freedom cannot be produced for this contrast."""


class ZeroVarianceOfVarianceError(DfUndefinedError):
    pass


class ArtifactError(LmmError, ValueError):
    """A serialized fit, contrast or report file is malformed."""


class ConvergenceWarning(UserWarning):
    """Iterative variance component estimation stopped at max_iter."""
