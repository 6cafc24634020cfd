"""Skinned capsule puppet: procedural construction, linear blend skinning,
per-frame part-wise alignment, and the puppet-imposed warp field.

The puppet treats the body as a set of near-rigid parts (one capsule per
bone). Per-frame alignment seeds each part from the bone motion between
consecutive skeleton observations and refines it with three iterations of
per-part point-to-plane rigid ICP against the target cloud.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import correspond
from .correspond import CorrespondenceSet, Intrinsics, NoCorrespondences, TargetCloud
from .geom import RigidTransform, normalize, orthonormalize, skew, so3_exp
from .skeleton import JointObservations, SkeletonTopology, part_motion_transforms, rest_joint_positions

JOINT_REGION_MAX_WEIGHT = 0.8  # below this max skinning weight a vertex is "joint region"
ICP_ITERATIONS = 3


class InvalidProportions(ValueError):
    pass


@dataclass
class PuppetMesh:
    """Rest-pose skinned template.

    weights is dense (V, B) with rows summing to 1; part_label is the argmax
    bone per vertex and joint_region flags vertices without a dominant bone.
    """

    vertices: np.ndarray
    normals: np.ndarray
    triangles: np.ndarray
    weights: np.ndarray
    part_label: np.ndarray = None
    joint_region: np.ndarray = None
    _kdtree: cKDTree = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.normals = np.asarray(self.normals, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=int)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.part_label is None:
            self.part_label = np.argmax(self.weights, axis=1)
        if self.joint_region is None:
            self.joint_region = self.weights.max(axis=1) < JOINT_REGION_MAX_WEIGHT

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_bones(self) -> int:
        return self.weights.shape[1]

    def kdtree(self) -> cKDTree:
        if self._kdtree is None:
            self._kdtree = cKDTree(self.vertices)
        return self._kdtree

    def mean_edge_length(self) -> float:
        v, t = self.vertices, self.triangles
        e = np.concatenate(
            [v[t[:, 0]] - v[t[:, 1]], v[t[:, 1]] - v[t[:, 2]], v[t[:, 2]] - v[t[:, 0]]]
        )
        return float(np.linalg.norm(e, axis=1).mean())


@dataclass
class AlignedPuppet:
    """Puppet posed into one frame: per-bone transforms plus deformed arrays."""

    bone_transforms: list
    vertices: np.ndarray
    normals: np.ndarray
    frame_index: int = -1


def stack_transforms(transforms) -> tuple:
    rots = np.stack([t.rotation for t in transforms])
    ts = np.stack([t.translation for t in transforms])
    return rots, ts


def skin(puppet: PuppetMesh, bone_transforms) -> tuple:
    """Linear blend skinning of the rest mesh by per-bone rigid transforms.

    Vertices move by the weight-blended transforms; normals by the blended
    rotation parts, re-normalized (the raw blend is generally non-unit).
    """
    rots, ts = stack_transforms(bone_transforms)
    per_bone_v = np.einsum("bij,vj->vbi", rots, puppet.vertices) + ts[None, :, :]
    verts = np.einsum("vb,vbi->vi", puppet.weights, per_bone_v)
    per_bone_n = np.einsum("bij,vj->vbi", rots, puppet.normals)
    nrm = np.einsum("vb,vbi->vi", puppet.weights, per_bone_n)
    return verts, normalize(nrm)


def _segment_distances(points: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray) -> np.ndarray:
    """Distance from each point to each segment; (P, S)."""
    d = seg_b - seg_a  # (S,3)
    len_sq = np.maximum(np.sum(d * d, axis=1), 1e-18)
    rel = points[:, None, :] - seg_a[None, :, :]  # (P,S,3)
    t = np.clip(np.einsum("psi,si->ps", rel, d) / len_sq, 0.0, 1.0)
    closest = seg_a[None, :, :] + t[..., None] * d[None, :, :]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def _capsule(p0: np.ndarray, p1: np.ndarray, radius: float, n_seg: int, n_cap: int, ring_spacing: float):
    """Closed capsule mesh around segment p0->p1; returns (verts, normals, tris)."""
    axis = p1 - p0
    length = np.linalg.norm(axis)
    d = axis / length
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = normalize(np.cross(d, helper))
    v = np.cross(d, u)

    theta = np.linspace(0.0, 2 * np.pi, n_seg, endpoint=False)
    circle = np.outer(np.cos(theta), u) + np.outer(np.sin(theta), v)  # (n_seg,3)

    rings = []  # list of (centers offset, radial scale, axial offset scale)
    # Bottom cap: pole handled separately; ring angle psi measured from the pole.
    for i in range(1, n_cap + 1):
        psi = (np.pi / 2) * i / (n_cap + 1)
        rings.append((p0 - radius * np.cos(psi) * d, radius * np.sin(psi), -np.cos(psi)))
    n_cyl = max(2, int(np.ceil(length / ring_spacing)) + 1)
    for t in np.linspace(0.0, 1.0, n_cyl):
        rings.append((p0 + t * axis, radius, 0.0))
    for i in range(n_cap, 0, -1):
        psi = (np.pi / 2) * i / (n_cap + 1)
        rings.append((p1 + radius * np.cos(psi) * d, radius * np.sin(psi), np.cos(psi)))

    verts = [p0 - radius * d]
    norms = [-d]
    for center, r, ax in rings:
        verts.append(center + r * circle)
        norms.append(normalize(r * circle / max(r, 1e-12) + ax * d))
    verts.append(p1 + radius * d)
    norms.append(d)
    verts = np.vstack([np.atleast_2d(x) for x in verts])
    norms = np.vstack([np.atleast_2d(x) for x in norms])

    tris = []
    n_rings = len(rings)
    ring_start = lambda k: 1 + k * n_seg
    top_pole = 1 + n_rings * n_seg
    for s in range(n_seg):
        s2 = (s + 1) % n_seg
        tris.append((0, ring_start(0) + s2, ring_start(0) + s))
    for k in range(n_rings - 1):
        a, b = ring_start(k), ring_start(k + 1)
        for s in range(n_seg):
            s2 = (s + 1) % n_seg
            tris.append((a + s, a + s2, b + s))
            tris.append((a + s2, b + s2, b + s))
    last = ring_start(n_rings - 1)
    for s in range(n_seg):
        s2 = (s + 1) % n_seg
        tris.append((top_pole, last + s, last + s2))
    return verts, norms, np.array(tris, dtype=int)


@dataclass
class BodyProportions:
    """Capsule radii per bone plus tessellation knobs."""

    bone_radii: np.ndarray
    n_segments: int = 24
    n_cap_rings: int = 4
    ring_spacing: float = 0.045

    def __post_init__(self):
        self.bone_radii = np.asarray(self.bone_radii, dtype=float)


_RADIUS_BY_NAME = {
    "spine": 0.125,
    "head": 0.085,
    "shoulder": 0.055,
    "elbow": 0.05,
    "wrist": 0.042,
    "hip": 0.068,
    "knee": 0.068,
    "ankle": 0.052,
}


def default_proportions(topology: SkeletonTopology) -> BodyProportions:
    radii = []
    for tail in topology.bone_tails:
        name = topology.joint_names[tail]
        base = name.split("_")[-1]
        radii.append(_RADIUS_BY_NAME.get(base, 0.05))
    return BodyProportions(np.array(radii))


def generate_procedural_puppet(
    topology: SkeletonTopology,
    proportions: BodyProportions = None,
) -> PuppetMesh:
    """Watertight capsule-per-bone humanoid with distance-falloff skinning.

    Each bone contributes one closed capsule; skinning weights fall off as a
    Gaussian of the distance to each bone segment (sigma = that bone's
    radius), normalized per vertex. Vertices whose largest weight stays below
    the joint-region threshold are flagged as joint region.
    """
    if proportions is None:
        proportions = default_proportions(topology)
    radii = proportions.bone_radii
    if len(radii) != topology.n_bones:
        raise InvalidProportions("need one radius per bone")
    if np.any(radii <= 0) or proportions.ring_spacing <= 0:
        raise InvalidProportions("radii and ring spacing must be positive")

    joints = rest_joint_positions(topology)
    heads = joints[topology.bone_heads]
    tails = joints[topology.bone_tails]
    lengths = np.linalg.norm(tails - heads, axis=1)
    if np.any(lengths <= 1e-6):
        raise InvalidProportions("zero-length bone")

    all_v, all_n, all_t = [], [], []
    offset = 0
    for b in range(topology.n_bones):
        v, n, t = _capsule(
            heads[b], tails[b], radii[b],
            proportions.n_segments, proportions.n_cap_rings, proportions.ring_spacing,
        )
        all_v.append(v)
        all_n.append(n)
        all_t.append(t + offset)
        offset += len(v)
    vertices = np.vstack(all_v)
    normals = np.vstack(all_n)
    triangles = np.vstack(all_t)

    dist = _segment_distances(vertices, heads, tails)  # (V,B)
    # Sub-radius falloff keeps mid-bone vertices dominated by their own bone
    # while leaving a roughly radius-wide mixed band around each joint.
    sigma = np.maximum(0.35 * radii, 1e-3)
    logw = -0.5 * (dist / sigma[None, :]) ** 2
    logw -= logw.max(axis=1, keepdims=True)
    weights = np.exp(logw)
    weights[weights < 1e-8] = 0.0
    weights /= weights.sum(axis=1, keepdims=True)
    return PuppetMesh(vertices, normals, triangles, weights)


def _solve_part_increment(points, normals, targets, tikhonov=1e-9):
    """One linearized point-to-plane rigid step; returns (rotvec, translation)."""
    lever = np.cross(points, normals)  # rows of d(residual)/d(rotvec)
    jac = np.hstack([lever, normals])
    res = np.sum(normals * (points - targets), axis=1)
    h = jac.T @ jac
    h[np.diag_indices_from(h)] += tikhonov
    step = np.linalg.solve(h, -jac.T @ res)
    return step[:3], step[3:]


def _part_rms(points, normals, targets):
    r = np.sum(normals * (points - targets), axis=1)
    return float(np.sqrt(np.mean(r * r))) if len(r) else 0.0


def align_to_frame(
    puppet: PuppetMesh,
    topology: SkeletonTopology,
    prev_joints: JointObservations,
    curr_joints: JointObservations,
    cloud: TargetCloud,
    intrinsics: Intrinsics,
    prev_transforms: list = None,
    frame_index: int = -1,
    dist_threshold: float = correspond.DEFAULT_DIST_THRESHOLD,
    normal_threshold: float = correspond.DEFAULT_NORMAL_THRESHOLD,
) -> AlignedPuppet:
    """Align the puppet to one frame: per-bone rigid seed + 3 ICP iterations.

    prev_transforms are the bone transforms that aligned the puppet to the
    previous frame (identity when the puppet was at rest). Each part is fit
    independently by point-to-plane rigid ICP on its own labeled vertices
    and the result is blended through skinning. Per-part steps are halved
    until they do not increase that part's residual on the iteration's fixed
    correspondences, and the refinement is dropped wholesale if it ends up
    worse than the seed.
    """
    motions = part_motion_transforms(topology, prev_joints, curr_joints)
    if prev_transforms is None:
        prev_transforms = [RigidTransform.identity()] * topology.n_bones
    transforms = [m.compose(p) for m, p in zip(motions, prev_transforms)]

    fit_mask = ~puppet.joint_region
    fit_ids = np.flatnonzero(fit_mask)
    rest_v = puppet.vertices[fit_ids]
    rest_n = puppet.normals[fit_ids]
    labels = puppet.part_label[fit_ids]

    def associate(trs):
        rots, ts = stack_transforms(trs)
        pts = np.einsum("vij,vj->vi", rots[labels], rest_v) + ts[labels]
        nrm = np.einsum("vij,vj->vi", rots[labels], rest_n)
        corr = correspond.projective_associate(
            pts, nrm, cloud, intrinsics, dist_threshold, normal_threshold
        )
        return pts, corr

    def overall_rms(trs):
        pts, corr = associate(trs)
        if len(corr) == 0:
            return None
        rots, _ = stack_transforms(trs)
        nrm = np.einsum("vij,vj->vi", rots[labels[corr.source_indices]], rest_n[corr.source_indices])
        return _part_rms(pts[corr.source_indices], nrm, corr.target_points)

    initial_rms = overall_rms(transforms)
    if initial_rms is None:
        raise NoCorrespondences("puppet alignment found no valid associations")
    seed = list(transforms)

    for _ in range(ICP_ITERATIONS):
        pts, corr = associate(transforms)
        if len(corr) == 0:
            break
        for b in range(topology.n_bones):
            sel = labels[corr.source_indices] == b
            if np.count_nonzero(sel) < 10:
                continue
            src = pts[corr.source_indices[sel]]
            nrm = np.einsum("ij,vj->vi", transforms[b].rotation, rest_n[corr.source_indices[sel]])
            tgt = corr.target_points[sel]
            rotvec, trans = _solve_part_increment(src, nrm, tgt)
            before = _part_rms(src, nrm, tgt)
            scale = 1.0
            for _ in range(5):
                inc = RigidTransform(so3_exp(scale * rotvec), scale * trans)
                moved = src @ inc.rotation.T + inc.translation
                moved_n = nrm @ inc.rotation.T
                if _part_rms(moved, moved_n, tgt) <= before + 1e-15:
                    transforms[b] = inc.compose(transforms[b])
                    break
                scale *= 0.5

    final_rms = overall_rms(transforms)
    if final_rms is None or final_rms > initial_rms:
        transforms = seed
    verts, nrm = skin(puppet, transforms)
    return AlignedPuppet(transforms, verts, nrm, frame_index)


@dataclass
class PuppetWarpField:
    """Blended-transform field anchored at puppet vertices.

    Each anchor carries the affine blend of per-bone transforms at that
    vertex; a query blends the nearest anchors with Gaussian weights and
    projects the blended matrix back to a rotation, keeping the blended
    action at the query point exact.
    """

    anchors: np.ndarray  # (V,3)
    affine_rot: np.ndarray  # (V,3,3), linear blend of bone rotations
    affine_t: np.ndarray  # (V,3)
    sigma: float
    k: int = 4
    _tree: cKDTree = field(default=None, repr=False, compare=False)

    @staticmethod
    def from_bone_transforms(
        anchors: np.ndarray, vertex_weights: np.ndarray, bone_transforms, sigma: float, k: int = 4
    ) -> "PuppetWarpField":
        rots, ts = stack_transforms(bone_transforms)
        aff_r = np.einsum("vb,bij->vij", vertex_weights, rots)
        aff_t = vertex_weights @ ts
        return PuppetWarpField(np.asarray(anchors, dtype=float), aff_r, aff_t, sigma, k)

    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.anchors)
        return self._tree

    def query(self, points: np.ndarray) -> list:
        """Rigid transform of the field at each query point."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        k = min(self.k, len(self.anchors))
        dist, idx = self.tree().query(points, k=k)
        dist = dist.reshape(len(points), k)
        idx = idx.reshape(len(points), k)
        # Shift by the nearest distance so the largest weight is exactly 1.
        logw = -0.5 * ((dist**2 - dist[:, :1] ** 2) / self.sigma**2)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        blend_r = np.einsum("pk,pkij->pij", w, self.affine_rot[idx])
        blend_t = np.einsum("pk,pki->pi", w, self.affine_t[idx])
        out = []
        for p, a, b in zip(points, blend_r, blend_t):
            rot = orthonormalize(a)
            out.append(RigidTransform(rot, a @ p + b - rot @ p))
        return out


def puppet_warp_field(aligned: AlignedPuppet, rest_puppet: PuppetMesh, x, k: int = 4) -> RigidTransform:
    """Warp-field transform imposed by the aligned puppet at point x."""
    fld = PuppetWarpField.from_bone_transforms(
        rest_puppet.vertices,
        rest_puppet.weights,
        aligned.bone_transforms,
        sigma=rest_puppet.mean_edge_length(),
        k=k,
    )
    return fld.query(np.asarray(x, dtype=float))[0]


def save_puppet(puppet: PuppetMesh, mesh_path, weights_path) -> None:
    """Write the rest mesh as OBJ and skinning weights as a CSV sidecar."""
    from .mesh import TriangleMesh, write_obj

    write_obj(mesh_path, TriangleMesh(puppet.vertices, puppet.normals, puppet.triangles))
    with open(weights_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["vertex", "bone", "weight"])
        vs, bs = np.nonzero(puppet.weights)
        for v, b in zip(vs, bs):
            writer.writerow([int(v), int(b), repr(float(puppet.weights[v, b]))])


def load_puppet(mesh_path, weights_path, n_bones: int = None) -> PuppetMesh:
    from .mesh import read_obj

    mesh = read_obj(mesh_path)
    rows = []
    with open(weights_path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for v, b, w in reader:
            rows.append((int(v), int(b), float(w)))
    if n_bones is None:
        n_bones = max(b for _, b, _ in rows) + 1
    weights = np.zeros((len(mesh.vertices), n_bones))
    for v, b, w in rows:
        weights[v, b] = w
    normals = mesh.normals
    if normals is None or len(normals) == 0:
        normals = np.zeros_like(mesh.vertices)
    return PuppetMesh(mesh.vertices, normals, mesh.triangles, weights)
