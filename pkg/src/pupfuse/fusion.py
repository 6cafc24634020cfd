"""Canonical-space truncated-signed-distance fusion and surface extraction.

Voxel values store distance divided by the truncation band, clamped to
[-1, 1], with per-voxel accumulation weights capped at w_max so old frames
eventually wash out. Depth is integrated by warping voxel centers into the
camera with the current deformation field and comparing against the observed
depth along each pixel ray.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from skimage import measure

from .correspond import Intrinsics
from .mesh import TriangleMesh

DEFAULT_VOXEL_SIZE = 0.01  # meters
DEFAULT_TRUNCATION_VOXELS = 4.0
DEFAULT_MAX_WEIGHT = 64.0


class EmptySurface(RuntimeError):
    """Volume contains no zero crossing to extract."""


@dataclass
class TsdfVolume:
    origin: np.ndarray  # (3,) corner of voxel (0,0,0)
    voxel_size: float
    dims: tuple  # (nx, ny, nz)
    values: np.ndarray = None
    weights: np.ndarray = None
    truncation: float = None  # meters

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.dims = tuple(int(d) for d in self.dims)
        if any(d <= 0 for d in self.dims):
            raise ValueError("dimensions must be positive")
        if self.values is None:
            self.values = np.ones(self.dims, dtype=np.float64)
        if self.weights is None:
            self.weights = np.zeros(self.dims, dtype=np.float64)
        if self.truncation is None:
            self.truncation = DEFAULT_TRUNCATION_VOXELS * self.voxel_size

    @staticmethod
    def around_points(points: np.ndarray, voxel_size: float = DEFAULT_VOXEL_SIZE,
                      margin_fraction: float = 0.2) -> "TsdfVolume":
        """Volume covering the bounding box of points plus a relative margin."""
        points = np.asarray(points, dtype=float)
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        pad = (hi - lo) * margin_fraction * 0.5 + voxel_size
        lo, hi = lo - pad, hi + pad
        dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int), 1)
        return TsdfVolume(lo, voxel_size, tuple(dims))

    def voxel_centers(self, flat_indices: np.ndarray = None) -> np.ndarray:
        if flat_indices is None:
            flat_indices = np.arange(int(np.prod(self.dims)))
        ijk = np.stack(np.unravel_index(flat_indices, self.dims), axis=-1)
        return self.origin + (ijk + 0.5) * self.voxel_size


def integrate_frame(
    volume: TsdfVolume,
    depth_m: np.ndarray,
    intrinsics: Intrinsics,
    warped_centers: np.ndarray = None,
    flat_indices: np.ndarray = None,
    max_weight: float = DEFAULT_MAX_WEIGHT,
) -> TsdfVolume:
    """Fuse one depth frame into the volume (in place; also returned).

    warped_centers are the voxel centers listed by flat_indices mapped into
    the camera frame by the current warp field; both default to the identity
    warp over the full grid. Updates follow the weighted running average with
    per-frame weight 1, and voxels more than one truncation band behind the
    observed surface are left untouched.
    """
    depth = np.asarray(depth_m, dtype=float)
    if flat_indices is None:
        flat_indices = np.arange(int(np.prod(volume.dims)))
    if warped_centers is None:
        warped_centers = volume.voxel_centers(flat_indices)

    z = warped_centers[:, 2]
    in_front = z > 1e-9
    zs = np.where(in_front, z, 1.0)
    u = np.round(intrinsics.fx * warped_centers[:, 0] / zs + intrinsics.cx).astype(int)
    v = np.round(intrinsics.fy * warped_centers[:, 1] / zs + intrinsics.cy).astype(int)
    inside = in_front & (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
    u = np.clip(u, 0, intrinsics.width - 1)
    v = np.clip(v, 0, intrinsics.height - 1)
    obs = depth[v, u]
    sdf = obs - z
    update = inside & (obs > 0) & (sdf > -volume.truncation)

    tsdf_new = np.clip(sdf[update] / volume.truncation, -1.0, 1.0)
    lin = flat_indices[update]
    vals = volume.values.reshape(-1)
    wts = volume.weights.reshape(-1)
    w_old = wts[lin]
    vals[lin] = np.where(w_old > 0, (w_old * vals[lin] + tsdf_new) / (w_old + 1.0), tsdf_new)
    wts[lin] = np.minimum(w_old + 1.0, max_weight)
    return volume


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Zero-isosurface triangulation with gradient normals.

    Only observed voxels (weight > 0) participate, and facets the masked
    marching cubes closes off along the observation boundary (they sit
    against unobserved voxels, not at a real crossing) are filtered out.
    Raises EmptySurface when no real crossing remains.
    """
    mask = volume.weights > 0
    obs = volume.values[mask]
    if obs.size == 0 or obs.min() > 0 or obs.max() < 0:
        raise EmptySurface("no zero crossing in observed region")
    try:
        verts_idx, faces, normals, _ = measure.marching_cubes(
            volume.values,
            level=0.0,
            mask=mask,
            allow_degenerate=False,
        )
    except (ValueError, RuntimeError) as exc:
        raise EmptySurface(str(exc)) from exc

    # A genuine crossing is surrounded by observed voxels; boundary facets
    # touch at least one unobserved corner of their cell.
    lo = np.floor(verts_idx - 1e-9).astype(int)
    lo = np.clip(lo, 0, np.array(volume.dims) - 2)
    good = np.ones(len(verts_idx), dtype=bool)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                good &= mask[lo[:, 0] + dx, lo[:, 1] + dy, lo[:, 2] + dz]
    faces = faces[good[faces].all(axis=1)]

    verts = verts_idx * volume.voxel_size + volume.origin[None, :] + 0.5 * volume.voxel_size
    corners = verts[faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]), axis=1
    )
    faces = faces[areas > 1e-12]
    if len(faces) == 0:
        raise EmptySurface("surface degenerate")
    used = np.zeros(len(verts), dtype=bool)
    used[faces] = True
    remap = np.cumsum(used) - 1
    # skimage's gradient normals descend toward the negative interior here,
    # so flip to point outward (toward positive free space).
    return TriangleMesh(verts[used], -normals[used], remap[faces])
