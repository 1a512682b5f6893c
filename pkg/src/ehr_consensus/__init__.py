"""Feature-importance consensus for sparse temporal health records."""

__version__ = "0.1.0"
