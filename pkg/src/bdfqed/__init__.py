"""Numerical core of the Bogoliubov-Dirac-Fock mean-field model."""

__version__ = "0.1.0"
