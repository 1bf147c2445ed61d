"""Trace-driven memory-system simulator built around hardware-managed
virtual blocks, with conventional x86-64-style paging baselines and
heterogeneous-memory mapping policies."""

__version__ = "0.1.0"
