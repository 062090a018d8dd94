"""kpfield: key-point-driven editable neural fields for flatland scenes."""

from .backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
