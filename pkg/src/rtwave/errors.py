"""Exception hierarchy shared across the package."""


class RTWaveError(Exception):
    """Base class for all package errors."""


class DomainError(RTWaveError, ValueError):
    """A density or pressure lies outside the domain of a pressure law."""


class DomainCoverageError(DomainError):
    """A tabulated law does not cover the range an integral needs."""


class AdmissibilityError(RTWaveError):
    """Equilibrium construction failed one of the admissibility conditions."""

    def __init__(self, condition, message):
        super().__init__(f"admissibility condition {condition} failed: {message}")
        self.condition = condition


class SingularVandermondeError(RTWaveError, ValueError):
    """Vandermonde exponents are not strictly increasing and positive."""


class BracketError(RTWaveError):
    """A root-finding bracket does not contain a sign change."""


class StateValidityError(RTWaveError):
    """The perturbed state has nonpositive total density."""


class GeometryBreakdownError(RTWaveError):
    """The flattening map left the small-deformation regime."""


class NumericalError(RTWaveError):
    """A linear or eigen solve failed."""


class ConfigError(RTWaveError, ValueError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class DataError(RTWaveError, ValueError):
    """Input series unsuitable for fitting."""
