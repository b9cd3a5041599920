"""Solvers and verifiers for exponential-utility games with relative performance concerns."""
__version__ = "0.1.0"
