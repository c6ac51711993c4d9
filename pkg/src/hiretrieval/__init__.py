"""Open-world hierarchical embedding retrieval toolkit."""

__version__ = "0.1.0"
