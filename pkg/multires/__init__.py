"""Bayesian multiresolution estimation of county-year functions."""

__version__ = "1.0.0"
