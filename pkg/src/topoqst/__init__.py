"""Topological edge-to-edge state transfer in dipolar chains."""

__version__ = "0.1.0"
