"""Hybrid time-domain BEM / FDTD solver for acoustic radiation from vibrating surfaces."""

__version__ = "0.1.0"
