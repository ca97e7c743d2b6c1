"""Exception hierarchy shared by all modules."""


class GeometryError(ValueError):
    """Base class for geometric precondition failures."""


class BehindCamera(GeometryError):
    pass


class DegenerateLine(GeometryError):
    pass


class DegenerateProjection(GeometryError):
    pass


class NearEpipolarPlane(GeometryError):
    """Interpretation planes of the two views are (nearly) coincident."""


class DegenerateConfiguration(GeometryError):
    pass


class NoModelFound(RuntimeError):
    pass


class SolverError(RuntimeError):
    pass


class InsufficientObservations(SolverError):
    pass


class DivergedSolve(SolverError):
    pass


class GaugeUnderconstrained(SolverError):
    pass


class Underconstrained(SolverError):
    pass


class MissingReference(KeyError):
    pass


class InfeasibleConfig(ValueError):
    pass


class DegenerateTrajectory(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class ConfigError(ValueError):
    pass
