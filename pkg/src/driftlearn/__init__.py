"""driftlearn: continual-learning engine and benchmark harness.

Implements EWC and SI parameter regularization on a small deterministic
frame classifier, a synthetic utterance stream with exponentially decaying
speaker retention, snapshot-based model selection, and WER evaluation with
bootstrap confidence intervals.
"""

from .errors import (
    ConfigurationError,
    DataError,
    DriftlearnError,
    NumericalError,
    ShapeError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DataError",
    "DriftlearnError",
    "NumericalError",
    "ShapeError",
    "StateError",
    "__version__",
]
