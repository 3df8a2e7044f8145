"""Deterministic simulator for differentially private split learning with
patch-level interpolation over a toy vision transformer."""

__version__ = "0.1.0"
