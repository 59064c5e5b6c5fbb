"""Cross-stitched speech/text encoder with tagging and classification heads."""

from .model import Model, ModelConfig
from .tensor import ParamStore, Rng

__all__ = ["Model", "ModelConfig", "ParamStore", "Rng"]
__version__ = "0.1.0"
