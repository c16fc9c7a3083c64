"""Round-based GPU cluster scheduling simulator with composable policies."""

__version__ = "0.1.0"
