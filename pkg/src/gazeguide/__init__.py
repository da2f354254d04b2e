"""Saliency- and eye-gaze-guided U-Net training on a numpy autodiff core."""

from .tensor import BackwardRule

__all__ = ["BackwardRule"]
__version__ = "0.1.0"
