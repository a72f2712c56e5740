"""Exception and warning types shared across the package.

Hard failures are exceptions; recoverable numerical conditions are warnings so
that long simulation runs keep going while still leaving a trace.
"""


class WeakfuseError(Exception):
    """Base class for all package-specific errors."""


class StructuralError(WeakfuseError):
    """A fusion design or dataset violates a structural precondition."""


class InvalidShape(WeakfuseError):
    """A distribution parameter left its admissible range during generation."""


class InsufficientData(WeakfuseError):
    """Too few rows to fit the requested nuisance component."""


class NonBinaryTreatment(WeakfuseError):
    """Propensity fitting was asked for a column that is not in {0, 1}."""


class NuisanceMissing(WeakfuseError):
    """A required fitted nuisance component is absent from the bundle."""


class UnsupportedFamily(WeakfuseError):
    """A weight-model operation is undefined for the given family."""


class DomainError(WeakfuseError):
    """A basis transform was evaluated outside its domain."""


class AllSingular(WeakfuseError):
    """Every fusion matrix in a batch was numerically singular."""


class SingularJacobian(WeakfuseError):
    """A design matrix inversion failed (for example a constant covariate)."""


class BadLevel(WeakfuseError):
    """Confidence level outside (0, 1)."""


class NegativeDelta(WeakfuseError):
    """Sensitivity radius must be nonnegative."""


class ParseError(WeakfuseError):
    """A config file, basis-term string, or CLI grid could not be parsed."""


class SemanticError(WeakfuseError):
    """A parsed config is structurally valid but semantically inconsistent."""


class MissingColumn(WeakfuseError):
    """An ingested CSV lacks a required column."""


class NonNumericCell(WeakfuseError):
    """An ingested CSV cell could not be converted to a number."""

    def __init__(self, row: int, column: str, value: str):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"non-numeric value {value!r} at row {row}, column {column!r}")


class EmptyFile(WeakfuseError):
    """An ingested CSV has no data rows."""


class DegenerateNormalizer(UserWarning):
    """A fitted normalizer was nonpositive and has been floored."""


class SingularBandwidth(UserWarning):
    """A kernel bandwidth collapsed (constant column) and has been floored."""


class SeparationWarning(UserWarning):
    """Logistic fit showed separation; a ridge penalty was applied."""


class SingularInformation(UserWarning):
    """The information matrix is numerically singular; pseudo-inverse used."""


class RankDeficiency(UserWarning):
    """A fusion matrix lost more than the one expected rank."""


class NoConvergence(UserWarning):
    """An iterative fit hit its iteration cap; the best iterate was kept."""


class DroppedTailTerms(UserWarning):
    """Higher-index tail adjustments were omitted at a weak index."""
