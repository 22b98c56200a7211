"""Per-action vs. pooled training of a temporal 2D-to-3D pose lifter."""

__version__ = "0.1.0"
