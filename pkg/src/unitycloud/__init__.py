"""Unity personal cloud storage: protocol actors and a deterministic simulator."""

__version__ = "0.1.0"
