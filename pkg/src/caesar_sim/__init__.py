"""Simulator for communication-efficient federated learning with staleness-aware
model compression, importance-aware gradient compression and batch-size
straggler mitigation."""

from .core import ProtocolError, UsageError

__version__ = "0.1.0"

__all__ = ["ProtocolError", "UsageError", "__version__"]
