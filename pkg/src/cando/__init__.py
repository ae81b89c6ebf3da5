"""Canonical-duality potential-reduction solvers and the SNL front end."""

__version__ = "0.1.0"
