"""Exception types raised across the package."""


class UdaregError(Exception):
    pass


class ShapeError(UdaregError, ValueError):
    """Array dimensions do not agree with a network or loss contract."""


class TrainingDivergenceError(UdaregError, FloatingPointError):
    """A gradient, loss or metric became non-finite during training."""

    def __init__(self, message, step=None, terms=None):
        super().__init__(message)
        self.step = step
        self.terms = dict(terms or {})


class DegenerateAnchorError(UdaregError, ValueError):
    """The two anchors map to the same embedded coordinate."""


class DataError(UdaregError, ValueError):
    """Malformed or inconsistent dataset input."""


class ConfigError(UdaregError, ValueError):
    """Invalid experiment configuration."""
