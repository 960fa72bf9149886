"""JOINED: joint optic disc/cup segmentation and fovea localization.

A two-stage multi-task pipeline for retinal fundus images: a coarse net with
shared encoder and distance-prediction, detection, and segmentation decoders,
followed by crop-conditioned fine modules for segmentation refinement and
fovea localization.
"""

__version__ = "0.1.0"

from .targets import Coordinate, LandmarkAnnotation  # noqa: F401
