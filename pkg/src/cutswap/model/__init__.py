"""Compact encoder, classification head and self-supervised training."""
