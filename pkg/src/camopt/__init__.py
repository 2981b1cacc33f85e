"""Fuel-optimal low-thrust collision avoidance for multiple conjunctions."""

__version__ = "0.1.0"
