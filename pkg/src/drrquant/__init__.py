"""CT-to-DRR projection and airspace-disease severity quantification toolkit."""

__version__ = "0.1.0"
