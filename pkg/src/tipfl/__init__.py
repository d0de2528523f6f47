"""Federated-learning workbench for targeted interpretable perturbation (TIP) against gradient inversion."""

__version__ = "0.1.0"
