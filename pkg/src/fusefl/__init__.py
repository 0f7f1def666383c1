"""Fully-secure federated learning over two-party computation, with a cost simulator."""

from .errors import FuseFLError

__version__ = "0.1.0"
__all__ = ["FuseFLError", "__version__"]
