"""Articulated non-rigid depth tracking and volumetric reconstruction.

Frame loop: a skinned capsule puppet is rigidly aligned per body part from
skeleton joints, its motion initializes a deformation-graph warp field, a
Gauss-Newton solve refines graph node transforms jointly with the skeleton
pose, and depth is fused into a canonical truncated-signed-distance volume.
"""

__version__ = "0.1.0"
