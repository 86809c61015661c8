"""Differentially private coarse-to-fine image generation on wavelet tokens."""

from .errors import DPWaveletError

__version__ = "0.1.0"

__all__ = ["DPWaveletError", "__version__"]
