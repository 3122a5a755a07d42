"""Malicious-parameter attacks on federated transformer language models."""

__version__ = "0.1.0"
