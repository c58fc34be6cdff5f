"""Two-stage facial wrinkle removal: wrinkle segmentation followed by FFC inpainting."""

__version__ = "0.1.0"
