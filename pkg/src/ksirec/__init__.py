"""Multimodal recommendation by soft integration of item content into a CF backbone."""

__version__ = "0.1.0"
