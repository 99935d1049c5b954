"""Distributed PV registry construction and downstream-task accuracy audit."""

__version__ = "0.1.0"
