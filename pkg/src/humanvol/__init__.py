"""Single-image volumetric human reconstruction core."""

__version__ = "0.1.0"
