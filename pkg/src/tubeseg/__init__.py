"""Tubule epithelium segmentation: a numpy encoder-decoder with watershed post-processing."""

__version__ = "0.1.0"
