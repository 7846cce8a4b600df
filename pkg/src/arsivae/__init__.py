"""Attribute-regularised soft-introspective VAEs (AR-SIVAE) and comparators."""

__version__ = "0.1.0"
