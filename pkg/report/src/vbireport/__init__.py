"""Turn simulator sweep results into normalized speedup tables and
grouped bar charts."""

__version__ = "0.1.0"
