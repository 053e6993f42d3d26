"""Unified-memory side-channel simulation and layer-sequence extraction."""

__version__ = "0.1.0"
