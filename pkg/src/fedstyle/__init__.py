"""Desk-scale simulator of style-clustered federated source-free domain adaptation."""

__version__ = "0.1.0"
