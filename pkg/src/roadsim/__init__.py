"""Roadside multi-camera scene simulation toolkit.

Refines fixed-camera extrinsics from 2D keypoints, samples multi-view
visible vehicle placements, calibrates monocular depth against LiDAR,
and composites 3D assets onto real background images with correct
occlusion in every camera.
"""

__version__ = "0.1.0"
