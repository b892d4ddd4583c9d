"""Adaptive instruction-driven reasoning over knowledge-graph subgraphs."""

__version__ = "0.1.0"
