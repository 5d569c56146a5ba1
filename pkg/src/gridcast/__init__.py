"""Citywide pollution-grid interpolation and forecasting toolkit."""

__version__ = "0.1.0"
