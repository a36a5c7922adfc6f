"""Coarse-to-fine segmentation seeds from learned prompts and mask proposals."""

__version__ = "0.1.0"
