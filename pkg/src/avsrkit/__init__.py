"""avsrkit: desk-scale end-to-end audio-visual speech recognition."""

__version__ = "0.1.0"

from .tensor import Tensor, backward

__all__ = ["Tensor", "backward", "__version__"]
