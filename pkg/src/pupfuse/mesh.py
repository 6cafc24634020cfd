"""Indexed triangle meshes, OBJ round-tripping, and surface sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V,3)
    normals: np.ndarray = None  # (V,3) or None
    triangles: np.ndarray = None  # (T,3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float)
        if self.triangles is None:
            self.triangles = np.zeros((0, 3), dtype=int)
        self.triangles = np.asarray(self.triangles, dtype=int)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def triangle_corners(self) -> np.ndarray:
        """(T,3,3) corner positions."""
        return self.vertices[self.triangles]

    def triangle_areas(self) -> np.ndarray:
        c = self.triangle_corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def triangle_normals(self) -> np.ndarray:
        c = self.triangle_corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(norm, 1e-18)

    def surface_area(self) -> float:
        return float(self.triangle_areas().sum())

    def bounding_box(self) -> tuple:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, transform) -> "TriangleMesh":
        nrm = None if self.normals is None else transform.apply_normal(self.normals)
        return TriangleMesh(transform.apply(self.vertices), nrm, self.triangles)


def write_obj(path, mesh: TriangleMesh) -> None:
    """Deterministic OBJ writer (fixed float formatting, 1-based faces)."""
    lines = []
    for v in mesh.vertices:
        lines.append("v %.6f %.6f %.6f" % (v[0], v[1], v[2]))
    if mesh.normals is not None and len(mesh.normals):
        for n in mesh.normals:
            lines.append("vn %.6f %.6f %.6f" % (n[0], n[1], n[2]))
    for t in mesh.triangles:
        lines.append("f %d %d %d" % (t[0] + 1, t[1] + 1, t[2] + 1))
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    verts, norms, tris = [], [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                norms.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                tris.append(idx)
    return TriangleMesh(
        np.array(verts, dtype=float).reshape(-1, 3),
        np.array(norms, dtype=float).reshape(-1, 3) if norms else None,
        np.array(tris, dtype=int).reshape(-1, 3),
    )


def sample_surface(mesh: TriangleMesh, min_per_triangle: int = 4) -> np.ndarray:
    """Deterministic dense surface sampling.

    Every triangle contributes its corners, edge midpoints, and centroid
    (7 points >= the requested minimum); triangles much larger than the
    median area additionally get a barycentric grid so sampling density
    stays roughly uniform.
    """
    c = mesh.triangle_corners()
    samples = [
        mesh.vertices,
        c.mean(axis=1),
        0.5 * (c[:, 0] + c[:, 1]),
        0.5 * (c[:, 1] + c[:, 2]),
        0.5 * (c[:, 2] + c[:, 0]),
    ]
    areas = mesh.triangle_areas()
    if len(areas):
        big = areas > 4.0 * np.median(areas)
        for tri in c[big]:
            n = int(np.ceil(np.sqrt(areas.max() / max(np.median(areas), 1e-18))))
            n = min(max(n, 2), 12)
            for i in range(n + 1):
                for j in range(n + 1 - i):
                    a, b = i / n, j / n
                    samples.append(((1 - a - b) * tri[0] + a * tri[1] + b * tri[2])[None, :])
    return np.vstack(samples)


def uv_sphere(center, radius: float, n_lat: int = 48, n_lon: int = 96) -> TriangleMesh:
    """Closed UV sphere with exact analytic normals."""
    center = np.asarray(center, dtype=float)
    verts = [np.array([0.0, 0.0, -1.0])]
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat - np.pi / 2
        for j in range(n_lon):
            theta = 2 * np.pi * j / n_lon
            verts.append(
                np.array([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)])
            )
    verts.append(np.array([0.0, 0.0, 1.0]))
    dirs = np.array(verts)
    tris = []
    ring = lambda i: 1 + (i - 1) * n_lon
    for j in range(n_lon):
        tris.append((0, ring(1) + (j + 1) % n_lon, ring(1) + j))
    for i in range(1, n_lat - 1):
        a, b = ring(i), ring(i + 1)
        for j in range(n_lon):
            j2 = (j + 1) % n_lon
            tris.append((a + j, a + j2, b + j))
            tris.append((a + j2, b + j2, b + j))
    top = len(dirs) - 1
    for j in range(n_lon):
        tris.append((top, ring(n_lat - 1) + j, ring(n_lat - 1) + (j + 1) % n_lon))
    return TriangleMesh(center + radius * dirs, dirs.copy(), np.array(tris, dtype=int))


def edge_counts(mesh: TriangleMesh) -> dict:
    """Map undirected edge -> number of incident triangles."""
    counts = {}
    for t in mesh.triangles:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    return counts
