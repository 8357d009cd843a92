"""Approximate optimal control of partially observed nonlinear diffusions.

The pipeline linearizes the filter error dynamics around a nominal mean
trajectory, which closes the moment equations: the original stochastic
problem becomes a deterministic two-point boundary value problem over the
nominal mean, the filter error covariance, and a costate matrix.  Solving
it yields a feedforward control together with time-varying feedback and
filter gains.
"""

import os

# honor the thread cap before numpy loads its BLAS
_threads = os.environ.get("SLINOPT_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del os, _threads

from .errors import SlinoptError, ValidationError, NumericalError, ConvergenceError
from .problem import (QuadraticCost, StochasticControlProblem, PolicyArtifact,
                      evaluate_policy, cost_expectation_terms, config_hash)
from . import sym
from . import models

__version__ = "0.1.0"

__all__ = [
    "SlinoptError", "ValidationError", "NumericalError", "ConvergenceError",
    "QuadraticCost", "StochasticControlProblem", "PolicyArtifact",
    "evaluate_policy", "cost_expectation_terms", "config_hash",
    "sym", "models",
]
