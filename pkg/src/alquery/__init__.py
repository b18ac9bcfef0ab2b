"""Active-learning query scoring and batch selection for object-detection pools."""

__version__ = "0.1.0"
