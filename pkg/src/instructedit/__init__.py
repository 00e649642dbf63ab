"""Training-free instruction-guided image editing pipeline."""

__version__ = "0.1.0"
