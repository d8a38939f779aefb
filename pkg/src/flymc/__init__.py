"""Firefly Monte Carlo: exact MCMC that touches only a subset of the data per iteration."""

__version__ = "0.1.0"
