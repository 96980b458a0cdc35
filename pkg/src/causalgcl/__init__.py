"""Invariant-learning graph contrastive recommendation with adjudicated graph editing."""

from .errors import CausalGCLError, ConfigError, ParseError, StageError
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "CausalGCLError", "ConfigError", "ParseError", "StageError", "__version__"]
