"""Numerical two-level q-Borel-Laplace summation for singularly perturbed q-difference-differential problems."""

__version__ = "0.1.0"
