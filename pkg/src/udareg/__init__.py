"""Unsupervised domain adaptation for regression on feature vectors."""
from ._kernels import backend
from .errors import (ConfigError, DataError, DegenerateAnchorError, ShapeError,
                     TrainingDivergenceError)

__version__ = "0.1.0"

__all__ = ["backend", "ConfigError", "DataError", "DegenerateAnchorError", "ShapeError",
           "TrainingDivergenceError", "__version__"]
