"""Embedded deformation graph: sparse node set whose blended rigid transforms
define the canonical-to-live warp field."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geom import RigidTransform, normalize

DEFAULT_NODE_SPACING = 0.05  # meters
DEFAULT_BLEND_K = 4  # nodes blended per warped point
DEFAULT_ARAP_NEIGHBORS = 6


class EmptyMesh(ValueError):
    pass


@dataclass
class DeformationGraph:
    """Node positions are canonical and immutable; transforms are replaced
    wholesale each solver iteration (rotations (N,3,3), translations (N,3)).

    neighbors is a list of sorted int arrays, symmetric by construction.
    skin_weights carries per-node bone weights copied from the nearest
    puppet vertex (used by the skeleton coupling term)."""

    positions: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    neighbors: list
    sigma: float
    blend_k: int = DEFAULT_BLEND_K
    skin_weights: np.ndarray = None
    _tree: cKDTree = field(default=None, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.positions)
        return self._tree

    def node_transform(self, i: int) -> RigidTransform:
        return RigidTransform(self.rotations[i], self.translations[i])

    def set_node_transform(self, i: int, t: RigidTransform) -> None:
        self.rotations[i] = t.rotation
        self.translations[i] = t.translation

    def warped_positions(self) -> np.ndarray:
        """Each node's canonical position under its own transform."""
        return np.einsum("nij,nj->ni", self.rotations, self.positions) + self.translations

    def arap_edges(self) -> np.ndarray:
        """(E,2) directed node index pairs (i, j in N(i))."""
        pairs = [(i, j) for i in range(self.n_nodes) for j in self.neighbors[i]]
        return np.array(pairs, dtype=int).reshape(-1, 2)


def build_graph(
    vertices: np.ndarray,
    node_spacing: float = DEFAULT_NODE_SPACING,
    arap_neighbors: int = DEFAULT_ARAP_NEIGHBORS,
    blend_k: int = DEFAULT_BLEND_K,
) -> DeformationGraph:
    """Subsample mesh vertices into graph nodes at the given spacing.

    Greedy dart throwing in vertex order: a vertex becomes a node when no
    prior node lies within node_spacing, which guarantees pairwise node
    distance >= node_spacing. Nodes link to their arap_neighbors nearest
    nodes, symmetrized. Transforms start at identity; sigma = node_spacing.
    """
    vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
    if len(vertices) == 0:
        raise EmptyMesh("cannot build a graph from an empty mesh")
    # Dart throwing over a spatial hash with cell size = spacing keeps the
    # scan linear and the vertex-order result deterministic.
    cells = {}
    nodes = []
    inv = 1.0 / node_spacing
    for v in vertices:
        key = tuple(np.floor(v * inv).astype(int))
        ok = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for n in cells.get((key[0] + dx, key[1] + dy, key[2] + dz), ()):
                        if np.linalg.norm(v - nodes[n]) < node_spacing:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            cells.setdefault(key, []).append(len(nodes))
            nodes.append(v)
    positions = np.array(nodes)

    n = len(positions)
    neighbors = [np.zeros(0, dtype=int) for _ in range(n)]
    if n > 1:
        k = min(arap_neighbors + 1, n)
        _, idx = cKDTree(positions).query(positions, k=k)
        idx = idx.reshape(n, k)
        sets = [set() for _ in range(n)]
        for i in range(n):
            for j in idx[i, 1:]:
                sets[i].add(int(j))
                sets[int(j)].add(i)
        neighbors = [np.array(sorted(s), dtype=int) for s in sets]
    return DeformationGraph(
        positions=positions,
        rotations=np.broadcast_to(np.eye(3), (n, 3, 3)).copy(),
        translations=np.zeros((n, 3)),
        neighbors=neighbors,
        sigma=node_spacing,
        blend_k=blend_k,
    )


def bind_points(graph: DeformationGraph, points: np.ndarray):
    """Node ids and normalized Gaussian blend weights for each point.

    The weight of the nearest node is pinned at the exponential's peak so
    normalization never underflows, and weights sum to 1 per point.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    k = min(graph.blend_k, graph.n_nodes)
    dist, idx = graph.tree().query(points, k=k)
    dist = dist.reshape(len(points), k)
    idx = idx.reshape(len(points), k)
    logw = -0.5 * (dist**2 - dist[:, :1] ** 2) / graph.sigma**2
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def warp_points(graph: DeformationGraph, points: np.ndarray, binding=None) -> np.ndarray:
    """Blended application of node transforms to canonical points."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    ids, w = bind_points(graph, points) if binding is None else binding
    per_node = (
        np.einsum("pkij,pj->pki", graph.rotations[ids], points) + graph.translations[ids]
    )
    return np.einsum("pk,pki->pi", w, per_node)


def warp_point(graph: DeformationGraph, point) -> np.ndarray:
    return warp_points(graph, point)[0]


def warp_normals(graph: DeformationGraph, points: np.ndarray, normals: np.ndarray, binding=None) -> np.ndarray:
    """Blended rotation-only transform of unit normals, re-normalized."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    normals = np.atleast_2d(np.asarray(normals, dtype=float))
    ids, w = bind_points(graph, points) if binding is None else binding
    per_node = np.einsum("pkij,pj->pki", graph.rotations[ids], normals)
    return normalize(np.einsum("pk,pki->pi", w, per_node))


def warp_normal(graph: DeformationGraph, point, normal) -> np.ndarray:
    return warp_normals(graph, point, normal)[0]


def initialize_from_puppet(graph: DeformationGraph, puppet_field) -> None:
    """Left-compose the puppet warp field onto every node transform.

    Each node transform becomes W_p(x') o T_i, where x' is the node's
    canonical position pushed through the current warp field (the place the
    node currently sits) and W_p is queried there. In place.
    """
    current = warp_points(graph, graph.positions)
    transforms = puppet_field.query(current)
    for i, fld in enumerate(transforms):
        composed = fld.compose(graph.node_transform(i))
        graph.rotations[i] = composed.rotation
        graph.translations[i] = composed.translation
