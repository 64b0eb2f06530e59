"""Numerical laboratory for two-layer compressible viscous surface waves.

Modules
-------
equilibrium   pressure laws, hydrostatic profiles, masses, critical surface tension
spectral      Fourier x Chebyshev discretisation, fields and Sobolev norms
geometry      Poisson extensions and the flattening map
stability     per-mode linearised pencils, growth rates, neutral surface tension
simulation    IMEX time stepping of the perturbed flattened system
harness       configs, scenarios, analysis and the ``rtwave`` command
"""
__version__ = "0.1.0"

from .errors import (AdmissibilityError, BracketError, ConfigError, DataError, DomainCoverageError,
                     DomainError, GeometryBreakdownError, NumericalError, RTWaveError,
                     SingularVandermondeError, StateValidityError)

__all__ = [
    "__version__", "AdmissibilityError", "BracketError", "ConfigError", "DataError",
    "DomainCoverageError", "DomainError", "GeometryBreakdownError", "NumericalError",
    "RTWaveError", "SingularVandermondeError", "StateValidityError",
]
