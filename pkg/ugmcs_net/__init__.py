"""UGMCS-Net - uncertainty-aware lung nodule segmentation from multiple annotations."""

__version__ = "0.1.0"
