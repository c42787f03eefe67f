"""Modular quantization-aware training toolkit on a synthetic 6D-pose task."""

__version__ = "0.1.0"
