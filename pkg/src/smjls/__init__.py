"""Finite-horizon optimal switching control of semi-Markov jump linear systems."""

__version__ = "0.1.0"
