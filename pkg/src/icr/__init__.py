"""Interactive click refinement for volumetric PET-CT tumor segmentation."""

__version__ = "0.1.0"
