"""Trigger reverse engineering with diversity and topological priors for Trojan detection."""

__version__ = "0.1.0"
