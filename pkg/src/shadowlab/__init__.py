"""Flows on charted manifolds, d-pseudotrajectories, and shadowing checks."""

__version__ = "0.1.0"
