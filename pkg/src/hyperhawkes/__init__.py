"""Hypernetwork-conditioned neural Hawkes processes for zero-shot and continual event modeling."""

__version__ = "0.1.0"
