"""CDR-based social network analysis and default prediction."""

__version__ = "0.1.0"
