"""Image I/O, dataset layout scanning and synthetic benchmark generation."""
