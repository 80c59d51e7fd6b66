"""Thin-structure segmentation on MRI slices: NIfTI I/O, ROI preprocessing,
a numpy U-Net with reverse-mode autodiff, and cross-validated evaluation."""

__version__ = "0.1.0"
