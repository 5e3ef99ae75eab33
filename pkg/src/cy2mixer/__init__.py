"""Cycle-aware spatiotemporal forecasting: cycle bases, clique adjacency and a gated MLP mixer."""

__version__ = "0.1.0"
