"""Exception types shared across the package.

Everything raised on purpose derives from CrossfitError so callers can
catch one base class at the CLI boundary and map to exit codes.
"""


class CrossfitError(Exception):
    """Base class for all errors raised by crossfit."""


# --- data / design errors -------------------------------------------------

class EmptyData(CrossfitError):
    """The input table has no rows."""


class MissingCell(CrossfitError):
    """A (row, column, replicate) index triple is absent from the table."""

    def __init__(self, i: int, j: int, k: int):
        self.triple = (i, j, k)
        super().__init__(f"missing observation for cell (i={i}, j={j}, k={k})")


class DuplicateCell(CrossfitError):
    """A (row, column, replicate) index triple occurs more than once."""

    def __init__(self, i: int, j: int, k: int):
        self.triple = (i, j, k)
        super().__init__(f"duplicate observation for cell (i={i}, j={j}, k={k})")


class BadIndex(CrossfitError):
    """Factor/replicate indices are not positive contiguous integers."""


class LevelViolation(CrossfitError):
    """A covariate declared constant at some level varies within it."""

    def __init__(self, name: str, level: str, spread: float, tol: float):
        self.name = name
        self.level = level
        self.spread = spread
        self.tol = tol
        super().__init__(
            f"covariate {name!r} declared {level}-level varies within a "
            f"{level} group (max spread {spread:.3e} > tol {tol:.3e})"
        )


# --- covariance / linear algebra errors -----------------------------------

class NonPositiveLambda(CrossfitError):
    """A variance-profile eigenvalue is not strictly positive."""


class DimensionMismatch(CrossfitError):
    """An array's shape does not match the design it is used with."""


class TooLargeForDenseOracle(CrossfitError):
    """Dense n-by-n materialisation refused (guard against runaway memory)."""


class SingularDesign(CrossfitError):
    """The GLS normal equations are numerically singular."""


class NonFiniteEvaluation(CrossfitError):
    """A function handed to the finite-difference helper returned NaN/inf."""


# --- fitting errors --------------------------------------------------------

class NoConvergence(CrossfitError):
    """Iteration limit reached before the convergence test was met.

    The best iterate found is attached as ``.best`` so callers can inspect
    how far the fit got.
    """

    def __init__(self, message: str, best=None):
        self.best = best
        super().__init__(message)


# --- inference errors -------------------------------------------------------

class BoundaryInference(CrossfitError):
    """Asymptotic covariance requested for a fit with a variance at the floor."""


class DegenerateWidth(CrossfitError):
    """Fourth-moment spread estimate is non-positive; interval undefined."""


# --- simulation errors -------------------------------------------------------

class ConfigError(CrossfitError):
    """A study configuration value is missing, unknown, or out of range."""


class InvalidMixture(CrossfitError):
    """Requested mixture cannot match the target variance."""


class TooManyFailures(CrossfitError):
    """More than the tolerated share of replicates failed to fit."""
