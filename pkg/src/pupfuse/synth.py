"""Synthetic ground-truth sequences: scripted skeletal motion, z-buffer depth
rendering, and the on-disk frame format consumed by the tracker.

Sequence directory layout (all files required per frame, color optional):
    intrinsics.json                  pinhole parameters + depth_unit_mm
    frame_%05d_depth.png             16-bit grayscale, millimeters, 0 = miss
    frame_%05d_color.png             8-bit flat-shaded render (unused by tracking)
    frame_%05d_skeleton.json         joint name/x/y/z (meters) and valid flag
    frame_%05d_gt.obj                ground-truth surface for metrics
    manifest.json                    frame count, motion statistics, units
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.interpolate import CubicSpline

from .correspond import Intrinsics
from .mesh import TriangleMesh, read_obj, write_obj
from .puppet import PuppetMesh, skin
from .skeleton import (
    JointObservations,
    Pose,
    SkeletonTopology,
    bone_transforms_between,
    forward_kinematics,
)
from .geom import RigidTransform


class TooFewFrames(ValueError):
    pass


class IoFailure(OSError):
    pass


class SequenceError(ValueError):
    """Sequence directory is malformed; the message names the offending file."""


def default_intrinsics(width: int = 320, height: int = 240, focal: float = 260.0) -> Intrinsics:
    return Intrinsics(fx=focal, fy=focal, cx=width / 2 - 0.5, cy=height / 2 - 0.5,
                      width=width, height=height)


# ---------------------------------------------------------------------------
# Motion scripts

@dataclass
class MotionScript:
    """Keyframed joint rotations plus a root translation offset curve.

    joint_curves maps a joint name to [(frame, rotvec3)] keyframes; the root
    curve holds [(frame, offset3)] added to the rest root position. Channels
    are interpolated componentwise with natural cubic splines.
    """

    n_frames: int
    joint_curves: dict = field(default_factory=dict)
    root_curve: list = field(default_factory=list)
    name: str = "custom"

    def _eval(self, keys, frame: float) -> np.ndarray:
        if not keys:
            return np.zeros(3)
        frames = np.array([k[0] for k in keys], dtype=float)
        values = np.array([k[1] for k in keys], dtype=float)
        if len(keys) == 1:
            return values[0]
        spline = CubicSpline(frames, values, axis=0, bc_type="natural")
        return spline(np.clip(frame, frames[0], frames[-1]))

    def pose_at(self, topology: SkeletonTopology, frame: float) -> Pose:
        rotvecs = np.zeros((topology.n_joints, 3))
        for name, keys in self.joint_curves.items():
            j = topology.joint_names.index(name)
            rotvecs[j] = self._eval(keys, frame)
        root_offset = self._eval(self.root_curve, frame)
        return Pose(RigidTransform.from_translation(root_offset), rotvecs)


def _sine_keys(n_frames: int, period: float, amplitude, phase: float = 0.0, keys_per_period: int = 8):
    amplitude = np.asarray(amplitude, dtype=float)
    step = max(period / keys_per_period, 1.0)
    frames = np.arange(0.0, n_frames + step, step)
    return [(f, amplitude * np.sin(2 * np.pi * f / period + phase)) for f in frames]


def builtin_script(name: str, n_frames: int) -> MotionScript:
    """Named parametric motions: static, arm_swing, jump, boxing_like."""
    if name == "static":
        return MotionScript(n_frames, name=name)
    if name == "arm_swing":
        period = 36.0
        swing = 1.25  # radians at the shoulders
        return MotionScript(
            n_frames,
            joint_curves={
                "l_shoulder": _sine_keys(n_frames, period, [0, 0, -swing]),
                "r_shoulder": _sine_keys(n_frames, period, [0, 0, swing]),
                "l_elbow": _sine_keys(n_frames, period, [0, 0, -0.35]),
                "r_elbow": _sine_keys(n_frames, period, [0, 0, 0.35]),
            },
            name=name,
        )
    if name == "jump":
        period = 30.0
        return MotionScript(
            n_frames,
            joint_curves={
                "l_knee": _sine_keys(n_frames, period, [0.7, 0, 0]),
                "r_knee": _sine_keys(n_frames, period, [0.7, 0, 0]),
                "l_hip": _sine_keys(n_frames, period, [-0.5, 0, 0]),
                "r_hip": _sine_keys(n_frames, period, [-0.5, 0, 0]),
                "l_shoulder": _sine_keys(n_frames, period, [0, 0, -0.6], np.pi),
                "r_shoulder": _sine_keys(n_frames, period, [0, 0, 0.6], np.pi),
            },
            root_curve=_sine_keys(n_frames, period, [0, -0.14, 0], np.pi / 2),
            name=name,
        )
    if name == "boxing_like":
        period = 24.0
        return MotionScript(
            n_frames,
            joint_curves={
                "l_shoulder": _sine_keys(n_frames, period, [-0.9, 0, -0.25]),
                "l_elbow": _sine_keys(n_frames, period, [-0.5, 0, 0]),
                "r_shoulder": _sine_keys(n_frames, period, [-0.9, 0, 0.25], np.pi),
                "r_elbow": _sine_keys(n_frames, period, [-0.5, 0, 0], np.pi),
                "spine": _sine_keys(n_frames, period, [0, 0.2, 0]),
            },
            root_curve=_sine_keys(n_frames, 2 * period, [0.04, 0, 0]),
            name=name,
        )
    raise KeyError(f"unknown script {name!r}")


BUILTIN_SCRIPTS = ("static", "arm_swing", "jump", "boxing_like")


# ---------------------------------------------------------------------------
# Depth rendering

def render_depth_float(mesh: TriangleMesh, intrinsics: Intrinsics):
    """Z-buffer rasterization; returns (depth meters, shade in [0,1]).

    Depth is sampled at integer pixel coordinates with perspective-correct
    1/z interpolation, so backprojected pixels land on the triangle planes.
    Misses are 0.
    """
    h, w = intrinsics.height, intrinsics.width
    depth = np.zeros((h, w))
    shade = np.zeros((h, w))
    if len(mesh.triangles) == 0:
        return depth, shade
    verts = mesh.vertices
    z = verts[:, 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    u = intrinsics.fx * verts[:, 0] / zs + intrinsics.cx
    v = intrinsics.fy * verts[:, 1] / zs + intrinsics.cy

    zbuf = np.full((h, w), np.inf)
    tri_normals = _face_normals(mesh)
    for t, tri in enumerate(mesh.triangles):
        if not front[tri].all():
            continue
        tu, tv, tz = u[tri], v[tri], z[tri]
        x0 = max(int(np.ceil(tu.min())), 0)
        x1 = min(int(np.floor(tu.max())), w - 1)
        y0 = max(int(np.ceil(tv.min())), 0)
        y1 = min(int(np.floor(tv.max())), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        denom = (tv[1] - tv[2]) * (tu[0] - tu[2]) + (tu[2] - tu[1]) * (tv[0] - tv[2])
        if abs(denom) < 1e-12:
            continue
        px, py = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        w0 = ((tv[1] - tv[2]) * (px - tu[2]) + (tu[2] - tu[1]) * (py - tv[2])) / denom
        w1 = ((tv[2] - tv[0]) * (px - tu[2]) + (tu[0] - tu[2]) * (py - tv[2])) / denom
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not inside.any():
            continue
        inv_z = w0 / tz[0] + w1 / tz[1] + w2 / tz[2]
        pz = np.where(inside & (inv_z > 0), 1.0 / np.where(inv_z > 0, inv_z, 1.0), np.inf)
        sub = zbuf[y0 : y1 + 1, x0 : x1 + 1]
        closer = pz < sub
        sub[closer] = pz[closer]
        # Headlight shading from the face normal; the camera looks along +z.
        shade[y0 : y1 + 1, x0 : x1 + 1][closer] = 0.2 + 0.8 * max(0.0, -tri_normals[t, 2])
    hitmask = np.isfinite(zbuf)
    depth[hitmask] = zbuf[hitmask]
    return depth, shade


def _face_normals(mesh: TriangleMesh) -> np.ndarray:
    c = mesh.vertices[mesh.triangles]
    n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.maximum(norm, 1e-18)
    # Orient toward the camera at the origin.
    flip = np.einsum("ti,ti->t", n, c.mean(axis=1)) > 0
    n[flip] = -n[flip]
    return n


def render_depth(mesh: TriangleMesh, intrinsics: Intrinsics) -> np.ndarray:
    """Depth image in integer millimeters (uint16); misses are 0."""
    depth_m, _ = render_depth_float(mesh, intrinsics)
    return quantize_depth(depth_m)


def quantize_depth(depth_m: np.ndarray) -> np.ndarray:
    return np.clip(np.round(depth_m * 1000.0), 0, 65535).astype(np.uint16)


def depth_to_meters(depth_mm: np.ndarray) -> np.ndarray:
    return depth_mm.astype(float) / 1000.0


# ---------------------------------------------------------------------------
# Sequence IO

def _depth_path(d, i):
    return os.path.join(d, "frame_%05d_depth.png" % i)


def _color_path(d, i):
    return os.path.join(d, "frame_%05d_color.png" % i)


def _skeleton_path(d, i):
    return os.path.join(d, "frame_%05d_skeleton.json" % i)


def _gt_path(d, i):
    return os.path.join(d, "frame_%05d_gt.obj" % i)


def write_skeleton_file(path, topology: SkeletonTopology, positions: np.ndarray, valid=None) -> None:
    if valid is None:
        valid = [True] * len(positions)
    doc = {
        "joints": [
            {
                "name": topology.joint_names[j],
                "x": round(float(positions[j, 0]), 9),
                "y": round(float(positions[j, 1]), 9),
                "z": round(float(positions[j, 2]), 9),
                "valid": bool(valid[j]),
            }
            for j in range(len(positions))
        ]
    }
    with open(path, "w", newline="\n") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def read_skeleton_file(path) -> JointObservations:
    with open(path) as f:
        doc = json.load(f)
    joints = doc["joints"]
    pos = np.array([[j["x"], j["y"], j["z"]] for j in joints], dtype=float)
    valid = np.array([j["valid"] for j in joints], dtype=bool)
    return JointObservations(pos, valid)


def motion_statistics(joint_positions: np.ndarray) -> dict:
    """Per-frame summed joint displacement and its summary statistics.

    joint_positions is (F, J, 3); the per-frame scalar (meters) sums the
    displacement of every joint from the previous frame.
    """
    joint_positions = np.asarray(joint_positions, dtype=float)
    if len(joint_positions) < 2:
        raise TooFewFrames("motion statistics need at least 2 frames")
    steps = np.linalg.norm(np.diff(joint_positions, axis=0), axis=2).sum(axis=1)
    return {
        "per_frame": steps.tolist(),
        "mean": float(steps.mean()),
        "min": float(steps.min()),
        "max": float(steps.max()),
        "std": float(steps.std()),
        "unit": "meters",
    }


def emit_sequence(
    puppet: PuppetMesh,
    topology: SkeletonTopology,
    script: MotionScript,
    intrinsics: Intrinsics,
    out_dir,
    depth_noise_sigma: float = 0.0,
    seed: int = 0,
    write_color: bool = True,
) -> dict:
    """Render and write a full synthetic sequence; returns the manifest.

    Every frame gets a ground-truth mesh, a skeleton document (all joints
    valid), a quantized depth image, and optionally a flat-shaded color
    image. Outputs are byte-deterministic for a fixed script and seed.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        rng = np.random.default_rng(seed)
        rest = Pose.identity(topology.n_joints)
        all_joints = []
        for f in range(script.n_frames):
            pose = script.pose_at(topology, f)
            rots, ts = bone_transforms_between(topology, rest, pose)
            transforms = [RigidTransform(r, t) for r, t in zip(rots, ts)]
            verts, norms = skin(puppet, transforms)
            gt = TriangleMesh(verts, norms, puppet.triangles)
            write_obj(_gt_path(out_dir, f), gt)

            _, joints = forward_kinematics(topology, pose)
            all_joints.append(joints)
            write_skeleton_file(_skeleton_path(out_dir, f), topology, joints)

            depth_m, shade = render_depth_float(gt, intrinsics)
            if depth_noise_sigma > 0:
                hit = depth_m > 0
                depth_m = depth_m + hit * rng.normal(0.0, depth_noise_sigma, depth_m.shape)
            Image.fromarray(quantize_depth(depth_m)).save(_depth_path(out_dir, f))
            if write_color:
                gray = np.clip(shade * 255.0, 0, 255).astype(np.uint8)
                Image.fromarray(np.repeat(gray[:, :, None], 3, axis=2)).save(_color_path(out_dir, f))

        with open(os.path.join(out_dir, "intrinsics.json"), "w", newline="\n") as fp:
            json.dump({**intrinsics.to_dict(), "depth_unit_mm": 1.0}, fp, indent=1)
            fp.write("\n")
        manifest = {
            "frame_count": script.n_frames,
            "script": script.name,
            "intrinsics": intrinsics.to_dict(),
            "depth_unit_mm": 1.0,
            "units": {"positions": "meters", "depth": "millimeters", "motion": "meters"},
            "motion_statistics": motion_statistics(np.array(all_joints))
            if script.n_frames >= 2
            else None,
            "has_color": write_color,
        }
        with open(os.path.join(out_dir, "manifest.json"), "w", newline="\n") as fp:
            json.dump(manifest, fp, indent=1)
            fp.write("\n")
        return manifest
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


@dataclass
class Sequence:
    """Reader over an emitted sequence directory."""

    directory: str
    intrinsics: Intrinsics
    n_frames: int

    @staticmethod
    def open(directory) -> "Sequence":
        directory = str(directory)
        intr_path = os.path.join(directory, "intrinsics.json")
        man_path = os.path.join(directory, "manifest.json")
        for p in (intr_path, man_path):
            if not os.path.exists(p):
                raise SequenceError(f"missing {p}")
        with open(intr_path) as f:
            intr = Intrinsics.from_dict(json.load(f))
        with open(man_path) as f:
            manifest = json.load(f)
        seq = Sequence(directory, intr, int(manifest["frame_count"]))
        seq.validate()
        return seq

    def validate(self) -> None:
        for i in range(self.n_frames):
            for p in (
                _depth_path(self.directory, i),
                _skeleton_path(self.directory, i),
                _gt_path(self.directory, i),
            ):
                if not os.path.exists(p):
                    raise SequenceError(f"missing {p}")

    def depth_meters(self, i: int) -> np.ndarray:
        img = np.asarray(Image.open(_depth_path(self.directory, i)))
        return depth_to_meters(img)

    def joints(self, i: int) -> JointObservations:
        return read_skeleton_file(_skeleton_path(self.directory, i))

    def gt_mesh(self, i: int) -> TriangleMesh:
        return read_obj(_gt_path(self.directory, i))

    def gt_mesh_path(self, i: int) -> str:
        return _gt_path(self.directory, i)
