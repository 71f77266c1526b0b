"""Risk-object identification by causal intervention on an object-level driving model."""

__version__ = "0.1.0"
