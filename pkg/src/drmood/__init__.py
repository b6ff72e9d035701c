"""Domain-regularized classifier head and OOD detectors for intent classification."""
from drmood._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
