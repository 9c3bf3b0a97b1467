"""Two-species stochastic Ricker competition model.

Deterministic map analysis, size-dependent branching dynamics, quasi-stationary
distributions of the process killed on the coordinate axes, and small-K
asymptotic experiments.
"""

from .params import ModelParams
from .offspring import OffspringDistribution

__version__ = "0.1.0"

__all__ = ["ModelParams", "OffspringDistribution", "__version__"]
