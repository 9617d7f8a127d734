"""Compiled kernels. Import :mod:`ralf.kernels` instead of this package directly."""
