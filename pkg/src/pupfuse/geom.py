"""Small rigid-transform and rotation toolbox shared by every other module.

Points and directions are plain numpy arrays of shape (3,) or (..., 3),
in meters (points) or unitless (directions). Rotations are 3x3 row-major
arrays; rigid transforms are (rotation, translation) pairs rather than 4x4
homogeneous matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Below this value of (1 + a.b) the two directions are treated as
# antiparallel and the closed-form rotation between them is singular.
ANTIPARALLEL_EPS = 1e-8


class AntiparallelAxes(ValueError):
    """Raised when a rotation between two opposite directions is requested."""


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.shape[-1] != 3:
        raise ValueError(f"expected trailing dimension 3, got shape {v.shape}")
    return v


def normalize(v) -> np.ndarray:
    """Return v / |v| (batched over leading dimensions)."""
    v = _as_vec3(v)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n


def skew(v) -> np.ndarray:
    """Cross-product matrix [v]x with [v]x @ w == cross(v, w)."""
    v = _as_vec3(v)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def rotation_between(a, b) -> np.ndarray:
    """Rotation matrix mapping unit direction a onto unit direction b.

    Uses the cross/dot closed form R = I + [v]x + [v]x^2 (1-c)/s^2 with
    v = a x b, c = a.b, s = |v|; the (1-c)/s^2 factor is evaluated as
    1/(1+c), which is the same quantity without the 0/0 at zero angle.
    Batched inputs of shape (..., 3) are supported.

    Raises AntiparallelAxes when 1 + a.b < ANTIPARALLEL_EPS for any pair;
    callers that need a fallback should substitute a half-turn about an
    axis orthogonal to a (see flip_rotation).
    """
    a = _as_vec3(a)
    b = _as_vec3(b)
    c = np.sum(a * b, axis=-1)
    if np.any(1.0 + c < ANTIPARALLEL_EPS):
        raise AntiparallelAxes("directions are antiparallel; rotation is not unique")
    v = np.cross(a, b)
    vx = skew(v)
    factor = 1.0 / (1.0 + c)
    eye = np.broadcast_to(np.eye(3), vx.shape)
    return eye + vx + (vx @ vx) * factor[..., None, None]


def flip_rotation(a) -> np.ndarray:
    """Half-turn rotation about an arbitrary axis orthogonal to unit vector a.

    Fallback used when rotation_between hits the antiparallel singularity.
    """
    a = _as_vec3(a)
    helper = np.array([1.0, 0.0, 0.0])
    if abs(a @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    axis = normalize(np.cross(a, helper))
    return so3_exp(np.pi * axis)


def so3_exp(rotvec) -> np.ndarray:
    """Rotation matrix from an exponential-map (axis * angle) vector."""
    w = _as_vec3(rotvec)
    angle = np.linalg.norm(w, axis=-1)
    wx = skew(w)
    wx2 = wx @ wx
    # Series coefficients are safe through angle -> 0.
    small = angle < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        k1 = np.where(small, 1.0, np.sin(angle) / np.where(small, 1.0, angle))
        k2 = np.where(small, 0.5, (1.0 - np.cos(angle)) / np.where(small, 1.0, angle**2))
    eye = np.broadcast_to(np.eye(3), wx.shape)
    return eye + k1[..., None, None] * wx + k2[..., None, None] * wx2


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Exponential-map vector of a rotation matrix, |result| <= pi."""
    rot = np.asarray(rot, dtype=float)
    cos_angle = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    if angle < 1e-8:
        return np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]) * 0.5
    if np.pi - angle < 1e-6:
        # Near a half-turn the antisymmetric part vanishes; recover the axis
        # from the symmetric part instead.
        m = (rot + np.eye(3)) * 0.5
        axis_sq = np.clip(np.diag(m), 0.0, None)
        i = int(np.argmax(axis_sq))
        axis = m[:, i] / np.sqrt(axis_sq[i])
        axis = axis / np.linalg.norm(axis)
        sin_part = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
        if sin_part @ axis < 0:
            axis = -axis
        return axis * angle
    axis = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    return axis * (angle / (2.0 * np.sin(angle)))


def orthonormalize(mat: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar projection via SVD, det forced to +1)."""
    u, _, vt = np.linalg.svd(np.asarray(mat, dtype=float))
    rot = u @ vt
    if np.ndim(rot) == 2:
        if np.linalg.det(rot) < 0:
            u[:, -1] = -u[:, -1]
            rot = u @ vt
        return rot
    neg = np.linalg.det(rot) < 0
    if np.any(neg):
        u[neg, :, -1] = -u[neg, :, -1]
        rot = u @ vt
    return rot


def point_to_plane(p, q, n_q) -> np.ndarray:
    """Signed distance from p to the plane through q with unit normal n_q.

    Equals n_q . (p - q); tangential displacement is invisible. Batched.
    """
    p = _as_vec3(p)
    q = _as_vec3(q)
    n_q = _as_vec3(n_q)
    return np.sum(n_q * (p - q), axis=-1)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation pair acting as x -> R @ x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    @staticmethod
    def from_translation(t) -> "RigidTransform":
        return RigidTransform(np.eye(3), np.asarray(t, dtype=float))

    @staticmethod
    def from_rotvec(rotvec, translation=None) -> "RigidTransform":
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)
        return RigidTransform(so3_exp(rotvec), t)

    def apply(self, points) -> np.ndarray:
        """Transform points of shape (3,) or (N, 3)."""
        p = _as_vec3(points)
        return p @ self.rotation.T + self.translation

    def apply_normal(self, normals) -> np.ndarray:
        """Transform directions with the rotation part only (unit in, unit out)."""
        return _as_vec3(normals) @ self.rotation.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying `other` first, then `self`."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def is_close(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=tol)
            and np.allclose(self.translation, other.translation, atol=tol)
        )


def compose(t1: RigidTransform, t2: RigidTransform) -> RigidTransform:
    """compose(t1, t2)(x) == t1(t2(x))."""
    return t1.compose(t2)
