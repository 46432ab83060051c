"""CT contrast-phase classification from organ median-HU features."""

__version__ = "0.1.0"
