"""Structural SLAM backend: points, lines and planes.

Submodules are imported lazily by callers; this package keeps its import
side-effect free so the CLI can configure threading before numpy loads.
"""

__version__ = "0.1.0"
