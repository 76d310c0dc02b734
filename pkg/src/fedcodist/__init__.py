"""Heterogeneous-capacity federated learning with server-side codistillation."""

__version__ = "0.1.0"
