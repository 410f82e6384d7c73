"""Multi-event causal discovery over video event sequences."""

__version__ = "0.1.0"
