"""Pathwise information-theoretic generalization bounds for SGD, estimated by Monte Carlo."""

__version__ = "0.1.0"
