"""Multi-scale booster lesion detection on a desk-scale feature pyramid."""

__version__ = "0.1.0"
