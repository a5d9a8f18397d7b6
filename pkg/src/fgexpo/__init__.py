"""Frontier-guided policy optimization on a synthetic verifiable-reward testbed."""

__version__ = "0.1.0"
