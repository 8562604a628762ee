"""Toy BreakNet: numpy autodiff, a hybrid CNN/transformer segmenter and synthetic shadowed B-scans."""

__version__ = "0.1.0"
