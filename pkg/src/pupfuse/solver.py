"""Joint Gauss-Newton refinement of deformation-graph node transforms and
skeleton pose against depth correspondences.

Four residual families enter one damped normal-equations solve:
  data      point-to-plane between graph-warped sources and their targets
  arap      local rigidity between neighboring graph nodes
  skeleton  point-to-plane between skeleton-skinned sources and the targets
  reg       agreement between each node's graph warp and its skeleton warp

Node transforms are updated through local increments (a world rotation about
the node's current position plus a translation); the pose through the
increment chart of the skeleton module. Correspondences are re-estimated
every outer iteration, puppet-mediated on the first when enabled.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import correspond
from .correspond import CorrespondenceSet, NoCorrespondences
from .defgraph import DeformationGraph, warp_normals, warp_points
from .geom import skew, so3_exp
from .skeleton import (
    Pose,
    SkeletonTopology,
    apply_pose_increment,
    bone_transforms_between,
    forward_kinematics,
    pose_increment_jacobian,
)


class SingularSystem(RuntimeError):
    """Normal equations unrecoverable even with damping."""


@dataclass
class EnergyWeights:
    data: float = 1.0
    arap: float = 5.0
    skeleton: float = 1.0
    reg: float = 2.0

    def __post_init__(self):
        vals = (self.data, self.arap, self.skeleton, self.reg)
        if any(v < 0 for v in vals):
            raise ValueError("energy weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one energy weight must be positive")


@dataclass
class SolverConfig:
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    max_iterations: int = 4
    initial_damping: float = 1e-4
    max_damping_retries: int = 10
    huber_delta: float = 0.01  # meters; <= 0 reverts to plain squares
    use_mediated: bool = True
    alternation: bool = False  # solve nodes then pose instead of jointly
    converge_rel: float = 1e-6
    converge_abs: float = 1e-12
    early_stop: bool = True  # stop before max_iterations once converged
    dist_threshold: float = correspond.DEFAULT_DIST_THRESHOLD
    normal_threshold: float = correspond.DEFAULT_NORMAL_THRESHOLD


@dataclass
class FrameData:
    """Everything one frame's solve needs besides the state itself."""

    cloud: correspond.TargetCloud
    intrinsics: correspond.Intrinsics
    source_vertices: np.ndarray  # (S,3) canonical surface vertices
    source_normals: np.ndarray  # (S,3)
    source_node_ids: np.ndarray  # (S,k) graph binding
    source_node_weights: np.ndarray  # (S,k)
    source_bone_weights: np.ndarray  # (S,B)
    topology: SkeletonTopology
    pose_ref: Pose  # pose in which canonical geometry is expressed
    node_bone_weights: np.ndarray  # (N,B)
    # First-iteration puppet mediation; all four present or mediation is off.
    nearest_puppet_vertex: np.ndarray = None  # (S,) into puppet vertices
    puppet_joint_region: np.ndarray = None
    aligned_vertices: np.ndarray = None
    aligned_normals: np.ndarray = None

    def mediation_available(self) -> bool:
        return self.nearest_puppet_vertex is not None and self.aligned_vertices is not None


@dataclass
class SolveReport:
    rows: list = field(default_factory=list)  # dicts per iteration
    converged: bool = False
    wall_time: float = 0.0
    final_correspondences: int = 0


# ---------------------------------------------------------------------------
# Residuals

def _node_positions_warped(rotations, translations, positions):
    return np.einsum("nij,nj->ni", rotations, positions) + translations


def _data_terms(rotations, translations, positions, frame, src_idx, targets):
    """Warped points/normals and the point-to-plane residual per pair."""
    ids = frame.source_node_ids[src_idx]
    w = frame.source_node_weights[src_idx]
    v = frame.source_vertices[src_idx]
    n = frame.source_normals[src_idx]
    rk = rotations[ids]  # (C,k,3,3)
    moved = np.einsum("ckij,cj->cki", rk, v) + translations[ids]
    q = np.einsum("ck,cki->ci", w, moved)
    m = np.einsum("ck,cki->ci", w, np.einsum("ckij,cj->cki", rk, n))
    mu = np.linalg.norm(m, axis=1)
    mu = np.where(mu < 1e-18, 1.0, mu)
    nbar = m / mu[:, None]
    r = np.einsum("ci,ci->c", nbar, q - targets)
    return ids, w, v, n, rk, moved, q, nbar, mu, r


def _skeleton_terms(pose, frame, src_idx, targets):
    rot_b, t_b = bone_transforms_between(frame.topology, frame.pose_ref, pose)
    bw = frame.source_bone_weights[src_idx]
    v = frame.source_vertices[src_idx]
    n = frame.source_normals[src_idx]
    per_b = np.einsum("bij,cj->cbi", rot_b, v) + t_b[None, :, :]
    q = np.einsum("cb,cbi->ci", bw, per_b)
    bn = np.einsum("bij,cj->cbi", rot_b, n)
    m = np.einsum("cb,cbi->ci", bw, bn)
    mu = np.linalg.norm(m, axis=1)
    mu = np.where(mu < 1e-18, 1.0, mu)
    nhat = m / mu[:, None]
    r = np.einsum("ci,ci->c", nhat, q - targets)
    return rot_b, t_b, bw, per_b, q, bn, nhat, mu, r


def _arap_residuals(rotations, translations, positions, edges):
    if len(edges) == 0:
        return np.zeros((0, 3))
    warped = _node_positions_warped(rotations, translations, positions)
    i, j = edges[:, 0], edges[:, 1]
    rest_edge = positions[i] - positions[j]
    return np.einsum("eij,ej->ei", rotations[i], rest_edge) - (warped[i] - warped[j])


def _reg_residuals(rotations, translations, positions, pose, frame):
    rot_b, t_b = bone_transforms_between(frame.topology, frame.pose_ref, pose)
    per_b = np.einsum("bij,nj->nbi", rot_b, positions) + t_b[None, :, :]
    lbs = np.einsum("nb,nbi->ni", frame.node_bone_weights, per_b)
    return _node_positions_warped(rotations, translations, positions) - lbs


def compute_residuals(rotations, translations, positions, edges, pose, frame,
                      src_idx, targets) -> dict:
    """All four unscaled residual blocks at an arbitrary state."""
    out = {}
    out["data"] = _data_terms(rotations, translations, positions, frame, src_idx, targets)[-1]
    out["arap"] = _arap_residuals(rotations, translations, positions, edges)
    out["skeleton"] = _skeleton_terms(pose, frame, src_idx, targets)[-1]
    out["reg"] = _reg_residuals(rotations, translations, positions, pose, frame)
    return out


def evaluate_energy(graph: DeformationGraph, pose: Pose, frame: FrameData,
                    corr: CorrespondenceSet, weights: EnergyWeights) -> dict:
    """Plain squared-residual energy terms and their weighted total."""
    res = compute_residuals(
        graph.rotations, graph.translations, graph.positions, graph.arap_edges(),
        pose, frame, corr.source_indices, corr.target_points,
    )
    e = {
        "data": float(np.sum(res["data"] ** 2)),
        "arap": float(np.sum(res["arap"] ** 2)),
        "skeleton": float(np.sum(res["skeleton"] ** 2)),
        "reg": float(np.sum(res["reg"] ** 2)),
    }
    e["total"] = (
        weights.data * e["data"]
        + weights.arap * e["arap"]
        + weights.skeleton * e["skeleton"]
        + weights.reg * e["reg"]
    )
    return e


def _huber_rho(r, delta):
    if delta <= 0:
        return r * r
    a = np.abs(r)
    return np.where(a <= delta, r * r, delta * (2 * a - delta))


def _huber_weight(r, delta):
    if delta <= 0:
        return np.ones_like(r)
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def robust_objective(res: dict, weights: EnergyWeights, huber_delta: float) -> float:
    """Step-acceptance objective: Huber on data/skeleton, squares elsewhere."""
    return float(
        weights.data * np.sum(_huber_rho(res["data"], huber_delta))
        + weights.arap * np.sum(res["arap"] ** 2)
        + weights.skeleton * np.sum(_huber_rho(res["skeleton"], huber_delta))
        + weights.reg * np.sum(res["reg"] ** 2)
    )


# ---------------------------------------------------------------------------
# Retraction

def retract_nodes(rotations, translations, positions, delta_nodes):
    """Apply (dt, dw) per node; rotation acts about the node's warped position."""
    c = _node_positions_warped(rotations, translations, positions)
    dt = delta_nodes[:, 0:3]
    dw = delta_nodes[:, 3:6]
    rinc = so3_exp(dw)
    new_r = rinc @ rotations
    new_t = np.einsum("nij,nj->ni", rinc, translations - c) + c + dt
    return new_r, new_t


def retract_state(rotations, translations, positions, pose, topology, delta):
    n = len(positions)
    delta_nodes = delta[: 6 * n].reshape(n, 6)
    new_r, new_t = retract_nodes(rotations, translations, positions, delta_nodes)
    new_pose = apply_pose_increment(topology, pose, delta[6 * n :])
    return new_r, new_t, new_pose


# ---------------------------------------------------------------------------
# Jacobian assembly

class _Assembly:
    """Sparse Jacobian blocks for one linearization point."""

    def __init__(self, rotations, translations, positions, edges, pose, frame,
                 src_idx, targets):
        self.n_nodes = len(positions)
        self.topology = frame.topology
        self.pose_base = 6 * self.n_nodes
        self.n_pose = 6 + 3 * (frame.topology.n_joints - 1)
        self.n_params = self.pose_base + self.n_pose
        self.edges = edges
        self.frame = frame
        self.src_idx = src_idx
        self.targets = targets
        self.rotations = rotations
        self.translations = translations
        self.positions = positions
        self.pose = pose
        self.node_centers = _node_positions_warped(rotations, translations, positions)

    def _pose_col(self, joint: int) -> int:
        return self.pose_base + (3 if joint == 0 else 6 + 3 * (joint - 1))

    def data_block(self):
        ids, w, v, n, rk, moved, q, nbar, mu, r = _data_terms(
            self.rotations, self.translations, self.positions, self.frame,
            self.src_idx, self.targets,
        )
        c, k = ids.shape
        a = moved - self.node_centers[ids]  # lever arm about each node center
        b = np.einsum("ckij,cj->cki", rk, n)
        g = (q - self.targets - nbar * r[:, None]) / mu[:, None]
        jt = w[:, :, None] * nbar[:, None, :]  # d r / d node translation
        jw = -w[:, :, None] * (
            np.cross(np.broadcast_to(nbar[:, None, :], a.shape), a)
            + np.cross(np.broadcast_to(g[:, None, :], b.shape), b)
        )
        rows = np.repeat(np.arange(c), k * 3)
        cols_t = (6 * ids[:, :, None] + np.arange(3)).reshape(-1)
        cols_w = (6 * ids[:, :, None] + 3 + np.arange(3)).reshape(-1)
        mat = sp.coo_matrix(
            (
                np.concatenate([jt.reshape(-1), jw.reshape(-1)]),
                (np.concatenate([rows, rows]), np.concatenate([cols_t, cols_w])),
            ),
            shape=(c, self.n_params),
        )
        return mat.tocsr(), r

    def skeleton_block(self):
        rot_b, t_b, bw, per_b, q, bn, nhat, mu, r = _skeleton_terms(
            self.pose, self.frame, self.src_idx, self.targets
        )
        c = len(r)
        topo = self.topology
        affects = topo.bone_joint_mask().astype(float)  # (B,J)
        _, joint_pos = forward_kinematics(topo, self.pose)
        g = (q - self.targets - nhat * r[:, None]) / mu[:, None]
        p_aff = np.einsum("cb,ba,cbi->cai", bw, affects, per_b)  # (C,J,3)
        w_aff = bw @ affects  # (C,J)
        beta = np.einsum("cb,ba,cbi->cai", bw, affects, bn)
        dense = np.zeros((c, self.n_pose))
        dense[:, 0:3] = nhat * bw.sum(axis=1)[:, None]
        for a_j in range(topo.n_joints):
            lever = p_aff[:, a_j, :] - w_aff[:, a_j : a_j + 1] * joint_pos[a_j]
            block = -(np.cross(nhat, lever) + np.cross(g, beta[:, a_j, :]))
            col = self._pose_col(a_j) - self.pose_base
            dense[:, col : col + 3] = block
        mat = sp.hstack(
            [sp.csr_matrix((c, self.pose_base)), sp.csr_matrix(dense)], format="csr"
        )
        return mat, r

    def arap_block(self):
        edges = self.edges
        if len(edges) == 0:
            return sp.csr_matrix((0, self.n_params)), np.zeros((0, 3))
        i, j = edges[:, 0], edges[:, 1]
        rest_edge = self.positions[i] - self.positions[j]
        rot_e = np.einsum("eij,ej->ei", self.rotations[i], rest_edge)
        res = rot_e - (self.node_centers[i] - self.node_centers[j])
        e = len(edges)
        rows3 = 3 * np.arange(e)

        data, rr, cc = [], [], []

        def add_block(block, rows, cols):
            rr.append((rows[:, None, None] + np.arange(3)[None, :, None]
                       + np.zeros((1, 1, 3), dtype=int)).reshape(-1))
            cc.append((cols[:, None, None] + np.zeros((1, 3, 1), dtype=int)
                       + np.arange(3)[None, None, :]).reshape(-1))
            data.append(block.reshape(-1))

        eye = np.broadcast_to(np.eye(3), (e, 3, 3))
        add_block(-eye, rows3, 6 * i)  # d/d dt_i
        add_block(eye, rows3, 6 * j)  # d/d dt_j
        add_block(-skew(rot_e), rows3, 6 * i + 3)  # d/d dw_i
        mat = sp.coo_matrix(
            (np.concatenate(data), (np.concatenate(rr), np.concatenate(cc))),
            shape=(3 * e, self.n_params),
        )
        return mat.tocsr(), res

    def reg_block(self):
        res = _reg_residuals(self.rotations, self.translations, self.positions,
                             self.pose, self.frame)
        n = self.n_nodes
        pose_jac = pose_increment_jacobian(
            self.topology, self.pose, self.positions, self.frame.node_bone_weights,
            pose_ref=self.frame.pose_ref,
        )  # (3N, n_pose): derivative of the skeleton-LBS prediction
        rows3 = 3 * np.arange(n)
        rr = (rows3[:, None, None] + np.arange(3)[None, :, None]
              + np.zeros((1, 1, 3), dtype=int)).reshape(-1)
        cc = ((6 * np.arange(n))[:, None, None] + np.zeros((1, 3, 1), dtype=int)
              + np.arange(3)[None, None, :]).reshape(-1)
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        node_part = sp.coo_matrix(
            (eye.reshape(-1), (rr, cc)), shape=(3 * n, self.n_params)
        ).tocsr()
        pose_part = sp.hstack(
            [sp.csr_matrix((3 * n, self.pose_base)), sp.csr_matrix(-pose_jac)],
            format="csr",
        )
        return node_part + pose_part, res


def _assemble(assembly: _Assembly, weights: EnergyWeights, huber_delta: float):
    """Stack scaled blocks into one sparse Jacobian and residual vector."""
    blocks, residuals = [], []
    j_d, r_d = assembly.data_block()
    s = np.sqrt(weights.data * _huber_weight(r_d, huber_delta))
    blocks.append(sp.diags(s) @ j_d)
    residuals.append(s * r_d)

    j_a, r_a = assembly.arap_block()
    s = np.sqrt(weights.arap)
    blocks.append(s * j_a)
    residuals.append(s * r_a.reshape(-1))

    j_s, r_s = assembly.skeleton_block()
    s = np.sqrt(weights.skeleton * _huber_weight(r_s, huber_delta))
    blocks.append(sp.diags(s) @ j_s)
    residuals.append(s * r_s)

    j_r, r_r = assembly.reg_block()
    s = np.sqrt(weights.reg)
    blocks.append(s * j_r)
    residuals.append(s * r_r.reshape(-1))

    return sp.vstack(blocks, format="csr"), np.concatenate(residuals)


# ---------------------------------------------------------------------------
# Correspondence search per outer iteration

def find_correspondences(graph: DeformationGraph, frame: FrameData, iteration: int,
                         config: SolverConfig) -> CorrespondenceSet:
    binding = (frame.source_node_ids, frame.source_node_weights)
    if iteration == 0 and config.use_mediated and frame.mediation_available():
        return correspond.puppet_mediated_correspondences(
            frame.source_vertices,
            frame.nearest_puppet_vertex,
            frame.puppet_joint_region,
            frame.aligned_vertices,
            frame.aligned_normals,
            frame.cloud,
            frame.intrinsics,
            config.dist_threshold,
            config.normal_threshold,
        )
    warped = warp_points(graph, frame.source_vertices, binding)
    normals = warp_normals(graph, frame.source_vertices, frame.source_normals, binding)
    corr = correspond.projective_associate(
        warped, normals, frame.cloud, frame.intrinsics,
        config.dist_threshold, config.normal_threshold,
    )
    if len(corr) == 0:
        raise NoCorrespondences("projective association produced no pairs")
    return corr


# ---------------------------------------------------------------------------
# Solver

def _solve_normal_equations(jacobian, residual, lam, active=None):
    jtj = (jacobian.T @ jacobian).tocsc()
    g = jacobian.T @ residual
    diag = jtj.diagonal()
    damp = sp.diags(lam * diag + 1e-10)
    h = (jtj + damp).tocsc()
    if active is not None:
        # Freeze inactive parameters by pinning their rows/columns to identity.
        mask = np.ones(h.shape[0], dtype=bool)
        mask[active] = False
        pin = np.flatnonzero(mask)
        h = h.tolil()
        h[pin, :] = 0.0
        h[:, pin] = 0.0
        for p in pin:
            h[p, p] = 1.0
        g = g.copy()
        g[pin] = 0.0
        h = h.tocsc()
    delta = spla.spsolve(h, -g)
    return delta


def solve_gauss_newton(
    graph: DeformationGraph,
    pose: Pose,
    frame: FrameData,
    config: SolverConfig = None,
    iteration_callback=None,
) -> tuple:
    """Run up to config.max_iterations of damped Gauss-Newton.

    Mutates graph transforms in place and returns (pose, SolveReport). Each
    outer iteration re-associates correspondences, linearizes, and accepts a
    step only if the damped robust objective does not increase; rejected
    steps raise the damping (up to max_damping_retries, after which the state
    is left unchanged for that iteration).
    """
    config = config or SolverConfig()
    t_start = time.perf_counter()
    report = SolveReport()
    lam = config.initial_damping
    positions = graph.positions
    edges = graph.arap_edges()
    n = graph.n_nodes
    corr = None

    for it in range(config.max_iterations):
        corr = find_correspondences(graph, frame, it, config)
        src_idx, targets = corr.source_indices, corr.target_points

        res = compute_residuals(graph.rotations, graph.translations, positions,
                                edges, pose, frame, src_idx, targets)
        f_old = robust_objective(res, config.weights, config.huber_delta)

        assembly = _Assembly(graph.rotations, graph.translations, positions, edges,
                             pose, frame, src_idx, targets)
        jac, r_vec = _assemble(assembly, config.weights, config.huber_delta)

        if config.alternation:
            stages = [np.arange(6 * n), np.arange(6 * n, assembly.n_params)]
        else:
            stages = [None]

        f_new = f_old
        for active in stages:
            accepted = False
            for _ in range(config.max_damping_retries):
                try:
                    delta = _solve_normal_equations(jac, r_vec, lam, active)
                except Exception:
                    delta = None
                if delta is None or not np.all(np.isfinite(delta)):
                    lam *= 10.0
                    continue
                cand_r, cand_t, cand_pose = retract_state(
                    graph.rotations, graph.translations, positions, pose,
                    frame.topology, delta,
                )
                cand_res = compute_residuals(cand_r, cand_t, positions, edges,
                                             cand_pose, frame, src_idx, targets)
                f_cand = robust_objective(cand_res, config.weights, config.huber_delta)
                if np.isfinite(f_cand) and f_cand <= f_old + 1e-15:
                    graph.rotations = cand_r
                    graph.translations = cand_t
                    pose = cand_pose
                    f_new = f_cand
                    lam = max(lam / 3.0, 1e-9)
                    accepted = True
                    break
                lam *= 10.0
            if not accepted and (lam > 1e18 or not np.isfinite(lam)):
                raise SingularSystem("damping exhausted without a finite step")
            if config.alternation and active is not None and accepted:
                # Re-linearize for the second stage.
                assembly = _Assembly(graph.rotations, graph.translations, positions,
                                     edges, pose, frame, src_idx, targets)
                jac, r_vec = _assemble(assembly, config.weights, config.huber_delta)
                res = compute_residuals(graph.rotations, graph.translations, positions,
                                        edges, pose, frame, src_idx, targets)
                f_old = robust_objective(res, config.weights, config.huber_delta)

        energies = evaluate_energy(graph, pose, frame, corr, config.weights)
        report.rows.append(
            {
                "iteration": it + 1,
                "e_data": energies["data"],
                "e_arap": energies["arap"],
                "e_skeleton": energies["skeleton"],
                "e_reg": energies["reg"],
                "total": energies["total"],
                "n_corr": len(corr),
            }
        )
        if iteration_callback is not None:
            iteration_callback(it, graph, pose)
        drop = f_old - f_new
        if f_new <= config.converge_abs or drop <= config.converge_rel * max(f_old, 1e-30):
            report.converged = True
            if config.early_stop:
                break

    report.final_correspondences = len(corr) if corr is not None else 0
    report.wall_time = time.perf_counter() - t_start
    return pose, report


# ---------------------------------------------------------------------------
# Jacobian audit

def check_jacobian(graph: DeformationGraph, pose: Pose, frame: FrameData,
                   corr: CorrespondenceSet, step: float = 1e-6) -> dict:
    """Max relative deviation between analytic and central-difference
    Jacobians, per energy term (small instances only)."""
    positions = graph.positions
    edges = graph.arap_edges()
    src_idx, targets = corr.source_indices, corr.target_points
    assembly = _Assembly(graph.rotations, graph.translations, positions, edges,
                         pose, frame, src_idx, targets)
    analytic = {
        "data": assembly.data_block()[0].toarray(),
        "arap": assembly.arap_block()[0].toarray(),
        "skeleton": assembly.skeleton_block()[0].toarray(),
        "reg": assembly.reg_block()[0].toarray(),
    }
    n_params = assembly.n_params

    def residual_vec(delta):
        r, t, p = retract_state(graph.rotations, graph.translations, positions,
                                pose, frame.topology, delta)
        res = compute_residuals(r, t, positions, edges, p, frame, src_idx, targets)
        return {k: np.asarray(v).reshape(-1) for k, v in res.items()}

    fd = {k: np.zeros_like(v) for k, v in analytic.items()}
    for p_i in range(n_params):
        d = np.zeros(n_params)
        d[p_i] = step
        plus = residual_vec(d)
        minus = residual_vec(-d)
        for k in fd:
            fd[k][:, p_i] = (plus[k] - minus[k]) / (2 * step)

    out = {}
    for k in fd:
        denom = max(1.0, np.abs(fd[k]).max()) if fd[k].size else 1.0
        out[k] = float(np.abs(analytic[k] - fd[k]).max() / denom) if fd[k].size else 0.0
    out["max"] = max(out["data"], out["arap"], out["skeleton"], out["reg"])
    return out
