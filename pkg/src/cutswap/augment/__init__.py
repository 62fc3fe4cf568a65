"""Saliency extraction, intensity clustering and CutSwap augmentation."""
