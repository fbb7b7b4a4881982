"""Bayesian neural networks with tied horseshoe priors, fitted by variational inference."""

__version__ = "0.1.0"
