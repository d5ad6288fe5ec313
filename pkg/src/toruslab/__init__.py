"""Numerical tools for compact toroidal leaves of exact presymplectic kernel foliations."""

__version__ = "0.1.0"
