"""Multi-floor object-goal navigation on procedurally generated grid buildings."""

__version__ = "0.1.0"
