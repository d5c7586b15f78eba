"""Repository planning graphs and graph-guided, test-driven repository generation."""

__version__ = "0.1.0"
