"""Model-aware policy-gradient training of adaptive quantum estimation strategies."""

__version__ = "0.1.0"
