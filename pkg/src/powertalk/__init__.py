"""Quasi-static co-simulation of power talk in DC microgrids."""

__version__ = "0.1.0"
