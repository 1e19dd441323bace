"""ncchart: verification engine for the non-Abelian KdV Backlund chart."""

__version__ = "0.1.0"
