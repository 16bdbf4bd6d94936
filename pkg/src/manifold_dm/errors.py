"""Exception hierarchy shared across the package."""


class ManifoldDMError(Exception):
    """Base class for all package errors."""


class DimensionError(ManifoldDMError, ValueError):
    pass


class GeometricDegeneracyError(ManifoldDMError):
    """Constraint Jacobian is rank deficient at the query point."""


class ProjectionError(ManifoldDMError):
    """Closest-point projection failed to converge.

    ``indices`` holds the rows of the batch that failed and ``residuals``
    their final constraint norms.
    """

    def __init__(self, message, indices=(), residuals=()):
        super().__init__(message)
        self.indices = tuple(int(i) for i in indices)
        self.residuals = tuple(float(r) for r in residuals)


class InvalidTangentError(ManifoldDMError, ValueError):
    pass


class MeshQualityError(ManifoldDMError):
    pass


class InvalidAlphaError(ManifoldDMError, ValueError):
    pass


class NumericOverflowError(ManifoldDMError, FloatingPointError):
    pass


class UnsupportedMethodError(ManifoldDMError, ValueError):
    pass


class DistanceTooFarError(ManifoldDMError):
    """Every quadrature kernel underflows at the query point."""


class ConfigError(ManifoldDMError, ValueError):
    pass


class StageError(ManifoldDMError):
    """An experiment stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
