"""Desk-scale sandbox for vision-based co-manipulation of a soft ply.

The package couples a tension-only mass-spring membrane, a synthetic depth
camera, a small from-scratch convolutional regressor that reads the membrane
deformation state off depth images, and a proportional twist controller that
closes the loop.
"""

__version__ = "0.1.0"

from softply.geometry import DeformationState, RigidTransform, RestConfiguration, PoseGridSpec

__all__ = [
    "DeformationState",
    "RigidTransform",
    "RestConfiguration",
    "PoseGridSpec",
    "__version__",
]
