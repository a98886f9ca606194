"""Counterfactual risk minimization for stochastic continuous-action policies."""

__version__ = "0.1.0"
