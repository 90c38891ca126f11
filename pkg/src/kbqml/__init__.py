"""Backward-equation conditional moments and quasi-likelihood estimation for scalar diffusions."""

__version__ = "0.1.0"
