"""Point-calibrated spectral neural operators.

Spectral transforms over Laplace eigenbases (grids and triangle meshes)
whose basis columns are modulated by learned per-point frequency gates, a
multi-head mixer network built on a minimal reverse-mode autodiff engine,
a training/evaluation harness, and a synthetic Darcy-flow data generator.
"""

from .kernels import backend_name
from .precision import get_precision, precision_scope, set_precision

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "backend_name",
    "get_precision",
    "precision_scope",
    "set_precision",
]
