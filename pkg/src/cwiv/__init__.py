"""Compliance-weighted instrumental variables estimation.

Core library (estimators, weight learners, simulation designs) plus a Monte
Carlo harness and a CLI.  Public API is re-exported here; see README for a
usage tour.
"""

from .errors import (
    ConfigError,
    CwivError,
    DegenerateFitError,
    DegenerateInstrumentError,
    FactorizationError,
    NumericalError,
    RankError,
    WeakFirstStageError,
    WeightError,
)
from .mathcore import RngStream

__version__ = "0.1.0"

__all__ = [
    "RngStream",
    "CwivError",
    "ConfigError",
    "DegenerateFitError",
    "DegenerateInstrumentError",
    "FactorizationError",
    "NumericalError",
    "RankError",
    "WeakFirstStageError",
    "WeightError",
    "__version__",
]
