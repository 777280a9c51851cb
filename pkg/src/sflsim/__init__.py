"""Desk-scale simulator of split federated momentum-contrast training."""

__version__ = "0.1.0"
