"""Saliency-guided CutSwap augmentation and memory-bank anomaly scoring."""

__all__ = ["__version__"]

__version__ = "0.1.0"
