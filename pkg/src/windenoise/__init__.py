"""Wide-CNN (WIN5 family) grayscale image denoising on a small numpy engine."""

__version__ = "0.1.0"
