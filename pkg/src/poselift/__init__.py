"""Self-supervised multi-view 3D human pose lifting toolkit."""

from . import autodiff, data, evaluate, geometry, losses, metrics, model, train
from .errors import PoseLiftError

__all__ = [
    "autodiff",
    "data",
    "evaluate",
    "geometry",
    "losses",
    "metrics",
    "model",
    "train",
    "PoseLiftError",
]

__version__ = "0.1.0"
