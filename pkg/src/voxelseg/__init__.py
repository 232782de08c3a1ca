"""Volumetric brain-tumor segmentation toolkit.

NIfTI-1 reading and writing, BraTS-style preprocessing, a NumPy 3D U-Net
trained with a dice + focal loss, and a command-line front end.
"""

from .errors import ConfigError, DataError, InvariantError, VoxelSegError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "InvariantError", "VoxelSegError", "__version__"]
