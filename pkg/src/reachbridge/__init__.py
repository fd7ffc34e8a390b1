"""Statistical reachability verification of image-based controllers via distilled low-dimensional controllers."""

__version__ = "0.1.0"
