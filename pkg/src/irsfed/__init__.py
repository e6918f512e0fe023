"""Federated channel estimation for IRS-assisted massive MIMO at desk scale."""

__version__ = "0.1.0"
