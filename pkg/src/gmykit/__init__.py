"""gmykit: construction and verification of Gibbs-Markov-Young inducing
schemes for one-dimensional nonuniformly expanding maps."""

__version__ = "0.1.0"

from . import hyperbolic, inducing, intervals, maps, measures, verify  # noqa: F401
