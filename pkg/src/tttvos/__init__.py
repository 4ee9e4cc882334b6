"""Test-time-training sequence layers and a desk-scale semi-supervised
video-object-segmentation pipeline built around them."""

__version__ = "0.1.0"
