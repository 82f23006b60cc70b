"""Multiscale particle filters for slow-fast SDEs and stiff reaction networks."""

__version__ = "0.1.0"
