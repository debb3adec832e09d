"""Slice-wise conditional flow matching for MRI contrast synthesis."""

__version__ = "0.1.0"
