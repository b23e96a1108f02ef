"""Desk-scale frozen-backbone cross-lingual pipeline with its own autodiff."""

__version__ = "0.1.0"
