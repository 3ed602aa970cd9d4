"""Multiview light-sheet cell identification: registration, view fusion,
semantic deconvolution, mean-shift detection, merging and evaluation."""

__version__ = "0.1.0"
