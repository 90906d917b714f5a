"""Effective dynamics of fast/slow stochastic systems.

Computes homogenized drift and diffusion coefficients of two-scale SDEs whose
fast process is a gradient flow, by solving the cell problem with a Hermite
function Galerkin method; simulates the resulting coarse SDE; and provides a
heterogeneous-multiscale (Green-Kubo) estimator and a spectral reduction of a
stochastic PDE for cross-validation.
"""

__version__ = "0.1.0"

from .errors import (
    DimensionError,
    DomainError,
    ExpressionSyntaxError,
    FastslowError,
    NumericError,
    ResourceError,
    UsageError,
)
from .expressions import Expression, apply_generator, differentiate, parse

__all__ = [
    "DimensionError",
    "DomainError",
    "Expression",
    "ExpressionSyntaxError",
    "FastslowError",
    "NumericError",
    "ResourceError",
    "UsageError",
    "apply_generator",
    "differentiate",
    "parse",
    "__version__",
]
