"""Kinematic chain, per-frame joint observations, and per-bone rigid motion.

The chain has a single 6-DoF root (hips) and 3-DoF rotational joints
elsewhere. Every non-root joint defines one bone from its parent (the bone
"head") to itself (the "tail"); body parts are identified with bones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import (
    AntiparallelAxes,
    RigidTransform,
    flip_rotation,
    normalize,
    rotation_between,
    skew,
    so3_exp,
    so3_log,
)

BONE_LENGTH_EPS = 1e-4  # meters; shorter bones carry no usable direction


class DegenerateBone(ValueError):
    """Bone too short to define a direction."""


class MissingJoint(ValueError):
    """Joint observation required by an operation is invalid or non-finite."""


@dataclass(frozen=True)
class SkeletonTopology:
    """Joint hierarchy plus rest offsets; bones are (parent, child) pairs.

    parents[j] < j for every non-root joint, parents[0] == -1. Bone b spans
    joints (bone_heads[b], bone_tails[b]) and doubles as body-part id b.
    """

    joint_names: tuple
    parents: np.ndarray
    rest_offsets: np.ndarray

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=int)
        offsets = np.asarray(self.rest_offsets, dtype=float)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_offsets", offsets)
        if parents[0] != -1 or np.count_nonzero(parents == -1) != 1:
            raise ValueError("topology must have exactly one root at index 0")
        if np.any(parents[1:] >= np.arange(1, len(parents))):
            raise ValueError("parents must be topologically sorted")
        if offsets.shape != (len(parents), 3):
            raise ValueError("rest_offsets must be (n_joints, 3)")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_bones(self) -> int:
        return self.n_joints - 1

    @property
    def bone_heads(self) -> np.ndarray:
        return self.parents[1:]

    @property
    def bone_tails(self) -> np.ndarray:
        return np.arange(1, self.n_joints)

    def ancestor_mask(self) -> np.ndarray:
        """(J, J) bool; entry [a, j] is True when a lies on the root-to-j path."""
        n = self.n_joints
        mask = np.eye(n, dtype=bool)
        for j in range(1, n):
            mask[:, j] |= mask[:, self.parents[j]]
        return mask

    def bone_joint_mask(self) -> np.ndarray:
        """(B, J) bool; [b, a] True when rotating joint a moves bone b.

        A bone is rigid in its head joint's frame, so it moves with every
        joint on the root-to-head path, the head included.
        """
        return self.ancestor_mask().T[self.bone_heads]


@dataclass
class JointObservations:
    """Per-frame joint positions (camera frame, meters) with validity flags."""

    positions: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.valid is None:
            self.valid = np.ones(len(self.positions), dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)


@dataclass
class Pose:
    """Root rigid transform plus exponential-map rotations per non-root joint.

    joint_rotvecs has one row per joint; row 0 (the root) stays zero, the
    root's rotation living in `root` instead.
    """

    root: RigidTransform
    joint_rotvecs: np.ndarray

    def __post_init__(self):
        self.joint_rotvecs = np.asarray(self.joint_rotvecs, dtype=float)
        mags = np.linalg.norm(self.joint_rotvecs, axis=-1)
        if np.any(mags > np.pi + 1e-6):
            raise ValueError("joint rotation vectors must stay within the pi chart")

    @staticmethod
    def identity(n_joints: int) -> "Pose":
        return Pose(RigidTransform.identity(), np.zeros((n_joints, 3)))

    def copy(self) -> "Pose":
        return Pose(self.root, self.joint_rotvecs.copy())

    @property
    def n_params(self) -> int:
        return 6 + 3 * (len(self.joint_rotvecs) - 1)


def default_topology() -> SkeletonTopology:
    """15-joint / 14-bone humanoid in camera coordinates (x right, y down,
    z forward); the subject stands upright facing the camera at ~2.2 m."""
    joints = [
        # name, parent, offset from parent (root: from camera origin)
        ("hips", -1, (0.00, 0.15, 2.20)),
        ("spine", 0, (0.00, -0.45, 0.00)),
        ("head", 1, (0.00, -0.32, 0.00)),
        ("l_shoulder", 1, (0.21, -0.02, 0.00)),
        ("l_elbow", 3, (0.16, 0.22, 0.00)),
        ("l_wrist", 4, (0.11, 0.24, 0.00)),
        ("r_shoulder", 1, (-0.21, -0.02, 0.00)),
        ("r_elbow", 6, (-0.16, 0.22, 0.00)),
        ("r_wrist", 7, (-0.11, 0.24, 0.00)),
        ("l_hip", 0, (0.10, 0.06, 0.00)),
        ("l_knee", 9, (0.01, 0.42, 0.00)),
        ("l_ankle", 10, (0.00, 0.42, 0.00)),
        ("r_hip", 0, (-0.10, 0.06, 0.00)),
        ("r_knee", 12, (-0.01, 0.42, 0.00)),
        ("r_ankle", 13, (0.00, 0.42, 0.00)),
    ]
    return SkeletonTopology(
        joint_names=tuple(name for name, _, _ in joints),
        parents=np.array([p for _, p, _ in joints]),
        rest_offsets=np.array([o for _, _, o in joints]),
    )


def bone_rigid_transform(prev_head, prev_tail, curr_head, curr_tail) -> RigidTransform:
    """Rigid transform carrying the previous bone onto the current one.

    The rotation aligns the previous bone direction with the current one and
    the translation maps the previous bone midpoint onto the current midpoint.
    An exactly antiparallel pair of directions falls back to a half-turn about
    an axis orthogonal to the previous direction.
    """
    pts = np.array([prev_head, prev_tail, curr_head, curr_tail], dtype=float)
    if not np.all(np.isfinite(pts)):
        raise MissingJoint("bone endpoints contain non-finite coordinates")
    prev_vec = pts[0] - pts[1]
    curr_vec = pts[2] - pts[3]
    if np.linalg.norm(prev_vec) <= BONE_LENGTH_EPS or np.linalg.norm(curr_vec) <= BONE_LENGTH_EPS:
        raise DegenerateBone("bone length below minimum")
    a = normalize(prev_vec)
    b = normalize(curr_vec)
    try:
        rot = rotation_between(a, b)
    except AntiparallelAxes:
        rot = flip_rotation(a)
    mid_prev = (pts[0] + pts[1]) * 0.5
    mid_curr = (pts[2] + pts[3]) * 0.5
    return RigidTransform(rot, -rot @ mid_prev + mid_curr)


def part_motion_transforms(
    topology: SkeletonTopology,
    prev: JointObservations,
    curr: JointObservations,
) -> list:
    """Per-bone rigid motion between two observation frames.

    Bones with a missing or degenerate observation inherit the transform of
    their parent part; parts at the root with no usable parent fall back to
    identity.
    """
    n = topology.n_bones
    out = [None] * n
    heads, tails = topology.bone_heads, topology.bone_tails
    for b in range(n):  # ascending tail order: parent bones come first
        h, t = heads[b], tails[b]
        usable = prev.valid[h] and prev.valid[t] and curr.valid[h] and curr.valid[t]
        if usable:
            try:
                out[b] = bone_rigid_transform(
                    prev.positions[h], prev.positions[t], curr.positions[h], curr.positions[t]
                )
                continue
            except (DegenerateBone, MissingJoint):
                pass
        parent_bone = h - 1 if h > 0 else None
        out[b] = out[parent_bone] if parent_bone is not None else RigidTransform.identity()
    return out


def forward_kinematics(topology: SkeletonTopology, pose: Pose):
    """Global joint rotations (J,3,3) and positions (J,3) for a pose.

    Joint j's global transform is (rotations[j], positions[j]); a bone's
    transform is that of its head joint.
    """
    n = topology.n_joints
    rots = np.empty((n, 3, 3))
    pos = np.empty((n, 3))
    rots[0] = pose.root.rotation
    pos[0] = pose.root.apply(topology.rest_offsets[0])
    for j in range(1, n):
        p = topology.parents[j]
        pos[j] = rots[p] @ topology.rest_offsets[j] + pos[p]
        rots[j] = rots[p] @ so3_exp(pose.joint_rotvecs[j])
    return rots, pos


def rest_joint_positions(topology: SkeletonTopology) -> np.ndarray:
    return forward_kinematics(topology, Pose.identity(topology.n_joints))[1]


def bone_transforms_between(topology: SkeletonTopology, pose_ref: Pose, pose_cur: Pose):
    """Per-bone transforms mapping pose_ref space onto pose_cur space.

    Returns stacked (B,3,3) rotations and (B,3) translations; these are the
    skinning transforms for geometry expressed in the reference pose.
    """
    rot_r, pos_r = forward_kinematics(topology, pose_ref)
    rot_c, pos_c = forward_kinematics(topology, pose_cur)
    heads = topology.bone_heads
    rel_rot = rot_c[heads] @ np.transpose(rot_r[heads], (0, 2, 1))
    rel_t = pos_c[heads] - np.einsum("bij,bj->bi", rel_rot, pos_r[heads])
    return rel_rot, rel_t


def apply_pose_increment(topology: SkeletonTopology, pose: Pose, delta: np.ndarray) -> Pose:
    """Retract a parameter increment onto a pose.

    delta layout: [root translation (3), root rotation (3), then 3 rotation
    coordinates per non-root joint in topology order]. Each rotation block is
    a world-frame rotation applied about the joint's current world position;
    root translation shifts the whole chain. Increments are folded back into
    the pose's local coordinates using the pre-increment globals.
    """
    delta = np.asarray(delta, dtype=float)
    n = topology.n_joints
    if delta.shape != (6 + 3 * (n - 1),):
        raise ValueError("pose increment has wrong length")
    rots, pos = forward_kinematics(topology, pose)

    root_dt, root_dw = delta[0:3], delta[3:6]
    root_rot = so3_exp(root_dw) @ pose.root.rotation
    root_t = pos[0] + root_dt - root_rot @ topology.rest_offsets[0]

    new_rotvecs = pose.joint_rotvecs.copy()
    for j in range(1, n):
        dw = delta[6 + 3 * (j - 1) : 9 + 3 * (j - 1)]
        if not np.any(dw):
            continue
        parent_rot = rots[topology.parents[j]]
        local = so3_exp(parent_rot.T @ dw) @ so3_exp(pose.joint_rotvecs[j])
        new_rotvecs[j] = so3_log(local)
    return Pose(RigidTransform(root_rot, root_t), new_rotvecs)


def skin_points(probe_points: np.ndarray, probe_weights: np.ndarray, bone_rots, bone_ts):
    """Blend per-bone transforms onto points: sum_b w_b (R_b p + t_b)."""
    per_bone = np.einsum("bij,mj->mbi", bone_rots, probe_points) + bone_ts[None, :, :]
    return np.einsum("mb,mbi->mi", probe_weights, per_bone)


def pose_increment_jacobian(
    topology: SkeletonTopology,
    pose: Pose,
    probe_points: np.ndarray,
    probe_weights: np.ndarray,
    pose_ref: Pose = None,
) -> np.ndarray:
    """Jacobian of skinned probe positions w.r.t. a pose increment at zero.

    probe_points (M,3) live in pose_ref space (identity pose when omitted)
    and carry per-bone weights (M,B). Output is (3M, 6 + 3(J-1)) with rows
    grouped per probe and the column layout of apply_pose_increment.
    """
    if pose_ref is None:
        pose_ref = Pose.identity(topology.n_joints)
    probe_points = np.asarray(probe_points, dtype=float)
    probe_weights = np.asarray(probe_weights, dtype=float)
    m = len(probe_points)
    n = topology.n_joints
    bone_rots, bone_ts = bone_transforms_between(topology, pose_ref, pose)
    _, joint_pos = forward_kinematics(topology, pose)
    affects = topology.bone_joint_mask()  # (B, J)

    # Per-probe, per-bone transformed points, then aggregated per joint over
    # the bones that joint moves.
    per_bone = np.einsum("bij,mj->mbi", bone_rots, probe_points) + bone_ts[None, :, :]
    w_aff = probe_weights @ affects  # (M, J): sum of weights of affected bones
    p_aff = np.einsum("mb,ba,mbi->mai", probe_weights, affects.astype(float), per_bone)

    jac = np.zeros((3 * m, 6 + 3 * (n - 1)))
    total_w = probe_weights.sum(axis=1)
    rows = np.arange(m) * 3
    # Root translation: identity scaled by the probe's total weight.
    for k in range(3):
        jac[rows + k, k] = total_w
    # Rotations: world increment about joint a moves the weighted point by
    # delta x (p_aff - w_aff * o_a), a skew-matrix column block.
    for a in range(n):
        col = 3 if a == 0 else 6 + 3 * (a - 1)
        lever = p_aff[:, a, :] - w_aff[:, a : a + 1] * joint_pos[a]
        blocks = -skew(lever)  # (M,3,3)
        jac[np.repeat(rows, 3) + np.tile(np.arange(3), m), col : col + 3] = blocks.reshape(-1, 3)
    return jac


def fit_pose_to_joints(
    topology: SkeletonTopology,
    pose0: Pose,
    observed: JointObservations,
    iterations: int = 12,
    damping: float = 1e-8,
) -> Pose:
    """Least-squares fit of the pose to observed joint positions.

    Gauss-Newton on the increment parameterization; unobservable coordinates
    (twist about bones, leaf-joint rotations) are held near pose0 by the
    damping. Needs at least the root to be valid.
    """
    n = topology.n_joints
    valid = observed.valid & np.all(np.isfinite(observed.positions), axis=1)
    if not np.any(valid):
        raise MissingJoint("no valid joints to fit")
    anc = topology.ancestor_mask()
    pose = pose0.copy()
    n_params = 6 + 3 * (n - 1)
    idx = np.flatnonzero(valid)
    for _ in range(iterations):
        _, pos = forward_kinematics(topology, pose)
        residual = (pos[idx] - observed.positions[idx]).reshape(-1)
        jac = np.zeros((3 * len(idx), n_params))
        for r, j in enumerate(idx):
            jac[3 * r : 3 * r + 3, 0:3] = np.eye(3)
            for a in range(n):
                # Rotating joint a moves joint j only when a is a strict
                # ancestor (the root also moves itself via translation).
                if j != a and anc[a, j]:
                    col = 3 if a == 0 else 6 + 3 * (a - 1)
                    jac[3 * r : 3 * r + 3, col : col + 3] = -skew(pos[j] - pos[a])
        h = jac.T @ jac
        h[np.diag_indices_from(h)] += damping
        step = np.linalg.solve(h, -jac.T @ residual)
        pose = apply_pose_increment(topology, pose, step)
        if np.linalg.norm(step) < 1e-12:
            break
    return pose
