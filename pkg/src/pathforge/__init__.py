"""Whole-slide image benchmarking: slides to patch features to evaluated tasks."""

from .errors import PathforgeError, ValidationError

__version__ = "0.1.0"

__all__ = ["PathforgeError", "ValidationError", "__version__"]
