"""Exception types shared across the package.

The CLI maps ConfigError to exit code 2 and every NumericalError to exit code 3.
"""


class MagtomoError(Exception):
    pass


class ConfigError(MagtomoError):
    pass


class NumericalError(MagtomoError):
    pass


class GeometryError(NumericalError):
    pass


class DomainError(GeometryError):
    """Evaluation point outside the chart disk."""


class NonTrappingError(GeometryError):
    """A geodesic did not leave the disk within the step budget."""


class ShootingError(GeometryError):
    """Newton shooting for the distance function failed (suspect non-simple metric)."""


class OutOfManifoldError(GeometryError):
    pass


class PreconditionError(NumericalError):
    pass


class ResolutionError(NumericalError):
    pass


class SmallnessError(NumericalError):
    """Phase unwrapping left the principal branch."""


class LinearSolveError(NumericalError):
    pass


class StudyError(NumericalError):
    pass
