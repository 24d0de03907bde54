"""STURE - online multi-object tracking with spatial-temporal mutual representations."""

__version__ = "0.1.0"
