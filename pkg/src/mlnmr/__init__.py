"""Multilevel network meta-regression for survival outcomes.

Joint synthesis of individual-level and aggregate time-to-event evidence:
aggregate arms contribute marginal likelihoods obtained by integrating the
individual model over each population's covariate distribution with
quasi-Monte Carlo, so one coherent regression is estimated across both data
kinds and results can be projected onto any target population.
"""

from .backend import BACKEND, USE_NUMBA

__version__ = "0.1.0"

__all__ = ["BACKEND", "USE_NUMBA", "__version__"]
