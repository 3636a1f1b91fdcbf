"""Two-stage cascaded video generation with low-to-high resolution flow matching."""

__version__ = "0.1.0"
