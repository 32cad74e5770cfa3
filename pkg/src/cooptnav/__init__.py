"""Co-optimization of multi-agent navigation policies and environments."""

__version__ = "0.1.0"
