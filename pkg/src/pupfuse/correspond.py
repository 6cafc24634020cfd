"""Depth backprojection, projective data association, and puppet-mediated
correspondence lookup.

All image-space operations follow the pinhole model with pixel (u, v)
sampling at integer coordinates; depth zero marks invalid pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DIST_THRESHOLD = 0.05  # meters
DEFAULT_NORMAL_THRESHOLD = np.deg2rad(45.0)


class BadIntrinsics(ValueError):
    pass


class NoCorrespondences(RuntimeError):
    """Every candidate pair was rejected or skipped."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise BadIntrinsics("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise BadIntrinsics("principal point outside image")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_dict(d: dict) -> "Intrinsics":
        return Intrinsics(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass
class TargetCloud:
    """Per-pixel camera-frame points and normals with a validity mask."""

    points: np.ndarray  # (H, W, 3)
    normals: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool

    @property
    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]


@dataclass
class CorrespondenceSet:
    """Pairs (source vertex id -> target point/normal) that passed rejection."""

    source_indices: np.ndarray  # (M,) int
    target_points: np.ndarray  # (M, 3)
    target_normals: np.ndarray  # (M, 3)
    weights: np.ndarray  # (M,)

    def __len__(self) -> int:
        return len(self.source_indices)

    @staticmethod
    def empty() -> "CorrespondenceSet":
        return CorrespondenceSet(
            np.zeros(0, dtype=int), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
        )


def backproject(depth_m: np.ndarray, intrinsics: Intrinsics) -> TargetCloud:
    """Lift a metric depth image to a camera-frame point/normal cloud.

    Pixel (u, v, d) maps to ((u-cx) d / fx, (v-cy) d / fy, d). Normals come
    from central differences of the point map and are oriented toward the
    camera; pixels without a computable normal are masked invalid.
    """
    depth = np.asarray(depth_m, dtype=float)
    h, w = depth.shape
    if (h, w) != (intrinsics.height, intrinsics.width):
        raise BadIntrinsics(f"depth image {w}x{h} does not match intrinsics")
    us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    has_depth = depth > 0
    pts = np.zeros((h, w, 3))
    pts[..., 0] = (us - intrinsics.cx) * depth / intrinsics.fx
    pts[..., 1] = (vs - intrinsics.cy) * depth / intrinsics.fy
    pts[..., 2] = depth

    du = np.zeros_like(pts)
    dv = np.zeros_like(pts)
    du[:, 1:-1] = pts[:, 2:] - pts[:, :-2]
    dv[1:-1, :] = pts[2:, :] - pts[:-2, :]
    normals = np.cross(dv, du)
    norm = np.linalg.norm(normals, axis=-1)
    ok_n = norm > 1e-12
    normals[ok_n] /= norm[ok_n][:, None]
    # Face the camera at the origin.
    flip = np.sum(normals * pts, axis=-1) > 0
    normals[flip] = -normals[flip]

    neighbors_ok = np.zeros_like(has_depth)
    neighbors_ok[1:-1, 1:-1] = (
        has_depth[1:-1, 2:] & has_depth[1:-1, :-2] & has_depth[2:, 1:-1] & has_depth[:-2, 1:-1]
    )
    valid = has_depth & neighbors_ok & ok_n
    normals[~valid] = 0.0
    return TargetCloud(points=pts, normals=normals, valid=valid)


def project(points: np.ndarray, intrinsics: Intrinsics):
    """Project camera-frame points; returns float (u, v) and an in-front mask."""
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    in_front = z > 1e-9
    zs = np.where(in_front, z, 1.0)
    u = intrinsics.fx * p[..., 0] / zs + intrinsics.cx
    v = intrinsics.fy * p[..., 1] / zs + intrinsics.cy
    return u, v, in_front


def projective_lookup(points: np.ndarray, cloud: TargetCloud, intrinsics: Intrinsics):
    """Raw projective association without rejection.

    Each point is projected to its nearest pixel; returns (hit, target_points,
    target_normals) where hit marks points whose pixel is inside the image and
    carries a valid cloud sample.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    u, v, in_front = project(points, intrinsics)
    ui = np.round(u).astype(int)
    vi = np.round(v).astype(int)
    inside = (
        in_front & (ui >= 0) & (ui < intrinsics.width) & (vi >= 0) & (vi < intrinsics.height)
    )
    ui_c = np.clip(ui, 0, intrinsics.width - 1)
    vi_c = np.clip(vi, 0, intrinsics.height - 1)
    hit = inside & cloud.valid[vi_c, ui_c]
    return hit, cloud.points[vi_c, ui_c], cloud.normals[vi_c, ui_c]


def projective_associate(
    points: np.ndarray,
    normals: np.ndarray,
    cloud: TargetCloud,
    intrinsics: Intrinsics,
    dist_threshold: float = DEFAULT_DIST_THRESHOLD,
    normal_threshold: float = DEFAULT_NORMAL_THRESHOLD,
    source_indices: np.ndarray = None,
) -> CorrespondenceSet:
    """Associate source points to the cloud through the image plane.

    A pair is kept only when the Euclidean gap is below dist_threshold and
    the angle between source and target normals is below normal_threshold.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    normals = np.atleast_2d(np.asarray(normals, dtype=float))
    if source_indices is None:
        source_indices = np.arange(len(points))
    hit, tgt_p, tgt_n = projective_lookup(points, cloud, intrinsics)
    gap = np.linalg.norm(points - tgt_p, axis=-1)
    cos_lim = np.cos(normal_threshold)
    keep = hit & (gap < dist_threshold) & (np.sum(normals * tgt_n, axis=-1) > cos_lim)
    return CorrespondenceSet(
        source_indices=np.asarray(source_indices)[keep],
        target_points=tgt_p[keep],
        target_normals=tgt_n[keep],
        weights=np.ones(int(np.count_nonzero(keep))),
    )


def puppet_mediated_correspondences(
    source_vertices: np.ndarray,
    nearest_puppet_vertex: np.ndarray,
    puppet_joint_region: np.ndarray,
    aligned_vertices: np.ndarray,
    aligned_normals: np.ndarray,
    cloud: TargetCloud,
    intrinsics: Intrinsics,
    dist_threshold: float = DEFAULT_DIST_THRESHOLD,
    normal_threshold: float = DEFAULT_NORMAL_THRESHOLD,
) -> CorrespondenceSet:
    """Correspondences established through the aligned puppet model.

    For each source vertex its precomputed nearest canonical puppet vertex is
    looked up; vertices landing in a joint region are skipped because those
    deform too freely to trust. The aligned twin of the puppet vertex is then
    projectively associated to the cloud and the resulting target is paired
    with the original source vertex. Rejection thresholds apply to the
    aligned-twin-to-cloud hop.

    Raises NoCorrespondences when every pair is skipped or rejected.
    """
    source_vertices = np.asarray(source_vertices, dtype=float)
    nearest = np.asarray(nearest_puppet_vertex, dtype=int)
    keep = ~np.asarray(puppet_joint_region, dtype=bool)[nearest]
    src_ids = np.flatnonzero(keep)
    if len(src_ids) == 0:
        raise NoCorrespondences("all source vertices map into puppet joint regions")
    twins = aligned_vertices[nearest[src_ids]]
    twin_normals = aligned_normals[nearest[src_ids]]
    corr = projective_associate(
        twins,
        twin_normals,
        cloud,
        intrinsics,
        dist_threshold,
        normal_threshold,
        source_indices=src_ids,
    )
    if len(corr) == 0:
        raise NoCorrespondences("all mediated pairs rejected")
    return corr
