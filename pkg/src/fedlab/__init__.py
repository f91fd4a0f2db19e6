"""Federated learning simulator with decoupled extractor/classifier training."""

__version__ = "0.1.0"
