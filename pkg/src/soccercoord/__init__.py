"""Multi-robot soccer coordination simulator."""

__version__ = "0.1.0"
