"""Semi-supervised segmentation with a manifold (boundary) supervised decoder branch."""

__version__ = "0.1.0"
