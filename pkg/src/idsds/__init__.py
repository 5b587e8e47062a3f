"""Deletion-based evaluation of attribution methods on small numpy networks."""

__version__ = "0.1.0"
