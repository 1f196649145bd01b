"""Inverse-consistent image registration with transforms built from Lie exponentials."""

__version__ = "0.1.0"
