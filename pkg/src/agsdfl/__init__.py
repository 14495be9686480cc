"""Backdoor-robust federated averaging on small dense networks."""
from . import attacks, data, nn, seeding
from .config import FlConfig

__version__ = "0.1.0"

__all__ = ["FlConfig", "attacks", "data", "nn", "seeding", "__version__"]
