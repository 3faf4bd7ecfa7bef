"""Multi-level basis kriging for scattered data in moderate to high dimension."""

from ._backend import NAME as backend

__all__ = ["backend"]
__version__ = "0.1.0"
