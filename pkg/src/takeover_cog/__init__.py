"""Bounded-rational takeover driving: simulation, online inference, prediction."""
__version__ = "0.1.0"
