"""Treed Gaussian process regression by reversible-jump MCMC."""

from .kernel import BACKEND, CorrParams, Family

__version__ = "0.1.0"

__all__ = ["BACKEND", "CorrParams", "Family", "__version__"]
