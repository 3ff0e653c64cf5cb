"""Self-supervised representation learning with residual-relaxed alignment."""

__version__ = "0.1.0"
