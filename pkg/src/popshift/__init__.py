"""Population-shift evaluation toolkit for 3D organ segmentation."""

from popshift.errors import PopShiftError

__version__ = "0.1.0"

__all__ = ["PopShiftError", "__version__"]
