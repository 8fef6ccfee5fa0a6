"""Identity-preserving facial attribute editing and its evaluation harness."""

__version__ = "0.1.0"
