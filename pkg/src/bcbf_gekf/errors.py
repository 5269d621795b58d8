"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class SingularMatrixError(ArithmeticError):
    """Cholesky factorization failed; carries the offending leading minor index."""

    def __init__(self, minor_index: int, message: str | None = None):
        self.minor_index = minor_index
        super().__init__(message or f"matrix not positive definite at leading minor {minor_index}")


class MeasurementRejectedError(RuntimeError):
    """Innovation covariance singular; the caller keeps the prior belief."""


class DivergenceError(RuntimeError):
    """Non-finite value produced during integration; names the component."""


class WrongRelativeDegreeError(ValueError):
    """Constraint does not have the relative degree the assembly assumes."""


class ConfigError(ValueError):
    """Malformed scenario configuration; message names the offending field."""
