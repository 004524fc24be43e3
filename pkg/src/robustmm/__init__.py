"""Robust MM-estimation of linear models with structured covariance."""

__version__ = "0.1.0"
