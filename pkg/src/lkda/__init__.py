"""Text/graph fusion QA models trained for graph-pathway fidelity."""

__version__ = "0.1.0"
