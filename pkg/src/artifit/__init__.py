"""Articulated object pose, part segmentation and joint estimation by fitting
a category-level energy directly to point clouds."""

__version__ = "0.1.0"
