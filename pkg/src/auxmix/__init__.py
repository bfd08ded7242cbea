"""Auxiliary mixture samplers for Bayesian hierarchical Poisson models."""

__version__ = "0.1.0"
