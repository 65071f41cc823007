"""Exception hierarchy shared by every module of the lab."""


class LabError(Exception):
    """Base class for all lab errors."""


class DomainError(LabError, ValueError):
    """A point or parameter lies outside the declared region."""


class NumericalError(LabError, ArithmeticError):
    """A numerical procedure failed (missing derivatives, step underflow, no convergence)."""


class CapabilityError(LabError):
    """A request exceeds what an object can provide (e.g. derivative order)."""


class EllipticityError(LabError, ValueError):
    """A symbol that must be elliptic has a vanishing or too small lower bound."""


class GeometryError(LabError, ValueError):
    """Geometric parameters violate a required inequality."""

    def __init__(self, message, failed=()):
        super().__init__(message)
        self.failed = list(failed)


class InadmissibleModelError(LabError, ValueError):
    """The model does not admit a Carleman weight at any tested depth."""


class ResolutionError(LabError, ValueError):
    """The grid does not resolve the semiclassical scale."""


class PreconditionError(LabError, ValueError):
    """An operation precondition does not hold."""


class FitError(LabError, ValueError):
    """Too few usable points for a regression."""


class ConfigError(LabError, ValueError):
    """Experiment configuration is malformed or fails schema validation."""

    def __init__(self, message, line=None, field=None):
        super().__init__(message)
        self.line = line
        self.field = field


class ArtifactError(LabError):
    """Stored artifacts are missing or from an incompatible schema."""
