"""Serve SAM1/SAM2 checkpoints behind the slicecast backend wire protocol."""

from .config import MODEL_NAMES, SIZES, AdapterConfig
from .server import AdapterServer

__version__ = "0.1.0"

__all__ = ["AdapterConfig", "AdapterServer", "MODEL_NAMES", "SIZES"]
