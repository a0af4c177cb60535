"""Data-free adversarial training of two style-based generators."""
__version__ = "0.1.0"
