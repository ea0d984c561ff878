"""Federated class-incremental learning with a data-free generator for replay."""

__version__ = "0.1.0"
