"""Moment-constrained optimal transport: relaxed marginals, solvers and rate experiments."""

__version__ = "0.1.0"
