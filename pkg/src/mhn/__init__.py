"""Multi-branch high-level semantic networks: graph analysis, toy inference, evaluation."""

__version__ = "0.1.0"
