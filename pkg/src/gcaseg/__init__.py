"""Graph cross attention segmentation engine for volumetric medical images."""

__version__ = "0.1.0"
