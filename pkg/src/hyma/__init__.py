"""Hypernetwork-based search and stitching of frozen encoder pairs."""
from . import connectors, embeddings, hypernet, numerics, objectives, trainer
from .errors import HymaError

__version__ = "0.1.0"

__all__ = ["connectors", "embeddings", "hypernet", "numerics", "objectives", "trainer", "HymaError"]
