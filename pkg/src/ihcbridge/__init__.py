"""Duplex-to-monoplex IHC translation through a stain-space bridge, on a synthetic phantom."""

__version__ = "0.1.0"
