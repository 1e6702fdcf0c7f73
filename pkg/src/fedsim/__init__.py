"""Federated learning simulation on a global virtual clock."""

__version__ = "0.1.0"
