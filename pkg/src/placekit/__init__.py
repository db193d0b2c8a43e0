"""Deterministic engine for language-guided 3D object placement."""

__version__ = "0.1.0"

MASK_FORMAT_VERSION = 1
