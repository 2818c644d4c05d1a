"""Volumetric CNN pipeline for binary MRI classification, written on numpy."""

__version__ = "0.1.0"
