"""Uncertainty-aware transient-stability-constrained preventive redispatch."""

__version__ = "0.1.0"
