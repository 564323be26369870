"""Multi-view reconstruction by volume rendering of signed ray distances."""

__version__ = "0.1.0"
