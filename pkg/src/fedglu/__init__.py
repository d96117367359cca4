"""Federated glucose forecasting with an excursion-weighted loss."""

__version__ = "0.1.0"
