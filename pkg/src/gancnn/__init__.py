"""Slice-wise GAN augmentation and 3-D CNN classification of volumetric scans."""

__version__ = "0.1.0"
