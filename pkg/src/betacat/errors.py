"""Exception types raised across the package.

Every error carries a short machine-readable ``code`` so that the CLI and the
HTTP service can map failures onto exit codes / status codes without string
matching.
"""


class BetacatError(Exception):
    """Base class. ``code`` is a stable identifier, ``kind`` the failure family."""

    code = "ERROR"
    kind = "internal"

    def __init__(self, message: str = "", code: str | None = None):
        if code is not None:
            self.code = code
        super().__init__(f"{self.code}: {message}" if message else self.code)


class ValidationError(BetacatError, ValueError):
    """Bad input: out-of-range score, invalid parameters, malformed files."""

    code = "INVALID_INPUT"
    kind = "input"


class ConstantTestError(ValidationError):
    code = "CONSTANT_TEST"


class MissingMetadataError(ValidationError):
    code = "MISSING_METADATA"


class MissingTimingError(ValidationError):
    """An item has no ``median_minutes`` but a per-minute quantity was requested."""

    code = "MISSING_TIMING"


class SchemaVersionError(ValidationError):
    code = "SCHEMA_VERSION"


class InsufficientDataError(ValidationError):
    code = "INSUFFICIENT_TESTS"


class DuplicateTestError(ValidationError):
    code = "DUPLICATE_TEST"


class UnknownTestError(ValidationError):
    code = "UNKNOWN_TEST"


class NoTestsRemainingError(ValidationError):
    code = "NO_TESTS_REMAINING"


class NumericalError(BetacatError, ArithmeticError):
    """The numerics failed: non-convergence, singular curvature, unbounded MLE."""

    code = "NUMERICAL"
    kind = "numeric"


class ConvergenceError(NumericalError):
    code = "NON_CONVERGENCE"

    def __init__(self, message: str = "", diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SingularHessianError(NumericalError):
    code = "SINGULAR_HESSIAN"


class UnboundedEstimateError(NumericalError):
    code = "MLE_UNBOUNDED"
