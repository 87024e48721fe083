"""Federated cross-domain recommendation with directional low-rank adapters."""

__version__ = "0.1.0"
