"""Regularization by noise: heat semigroup, Fokker-Planck and BSPDE solvers along Brownian paths."""

__version__ = "0.1.0"
