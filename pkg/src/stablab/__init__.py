"""Stability laboratory for quasilinear elliptic problems with Robin data."""

__version__ = "0.1.0"
