"""USCS segmentation lab: semi-supervised segmentation with a two-input two-output network."""

__version__ = "1.0.0"
