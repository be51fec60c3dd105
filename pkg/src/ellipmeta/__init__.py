"""Objective Bayesian multivariate meta-analysis under elliptical
random-effects models: noninformative priors from the Fisher information,
independence Metropolis-Hastings posterior sampling, and reporting tools.
"""

__version__ = "0.1.0"

from .elliptical import DensityGenerator, JConstants, j_constants
from .mcmc import Draws, SamplerConfig, run_chain, sufficient_stats
from .posterior import Dataset, PosteriorKernel
from .priors import PriorSpec, propriety_gate

__all__ = [
    "DensityGenerator",
    "JConstants",
    "j_constants",
    "Draws",
    "SamplerConfig",
    "run_chain",
    "sufficient_stats",
    "Dataset",
    "PosteriorKernel",
    "PriorSpec",
    "propriety_gate",
    "__version__",
]
