"""Variational Bayesian block term decomposition."""

__version__ = "0.1.0"
