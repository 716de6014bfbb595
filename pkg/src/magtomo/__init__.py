"""Geodesic ray transforms and magnetic Schrodinger inverse problems on 2D disk charts."""

__version__ = "0.1.0"
