"""Frame-to-frame reconstruction pipeline and the initialization ablation.

Per frame: align the capsule puppet from the skeleton prior, seed the
deformation graph with the puppet's motion, jointly refine graph and pose by
Gauss-Newton, fuse depth into the canonical TSDF, and write the live surface.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import correspond, defgraph, fusion, metrics, puppet as puppet_mod, solver, synth
from .correspond import NoCorrespondences
from .defgraph import DeformationGraph
from .geom import RigidTransform
from .mesh import TriangleMesh, write_obj
from .skeleton import (
    JointObservations,
    Pose,
    SkeletonTopology,
    default_topology,
    fit_pose_to_joints,
    rest_joint_positions,
)
from .solver import EnergyWeights, FrameData, SolverConfig, SingularSystem

DIAGNOSTICS_HEADER = [
    "frame", "iteration", "e_data", "e_arap", "e_skeleton", "e_reg", "total", "n_corr",
]


@dataclass
class GraphConfig:
    node_spacing: float = defgraph.DEFAULT_NODE_SPACING
    blend_k: int = defgraph.DEFAULT_BLEND_K
    arap_neighbors: int = defgraph.DEFAULT_ARAP_NEIGHBORS


@dataclass
class FusionConfig:
    voxel_size: float = fusion.DEFAULT_VOXEL_SIZE
    truncation_voxels: float = fusion.DEFAULT_TRUNCATION_VOXELS
    max_weight: float = fusion.DEFAULT_MAX_WEIGHT


@dataclass
class PipelineConfig:
    sequence_dir: str = ""
    output_dir: str = ""
    solver: SolverConfig = field(default_factory=SolverConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    puppet_init: bool = True
    skeleton_term: bool = True
    mediated_correspondences: bool = True
    max_frames: int = None
    max_sources: int = 15000
    rebuild_area_fraction: float = 0.10

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "PipelineConfig":
        cfg = PipelineConfig()
        for key, value in doc.items():
            if key == "solver":
                weights = value.pop("weights", None)
                if weights:
                    cfg.solver.weights = EnergyWeights(**weights)
                for k, v in value.items():
                    setattr(cfg.solver, k, v)
            elif key == "graph":
                cfg.graph = GraphConfig(**value)
            elif key == "fusion":
                cfg.fusion = FusionConfig(**value)
            else:
                setattr(cfg, key, value)
        return cfg

    @staticmethod
    def from_json(path) -> "PipelineConfig":
        with open(path) as f:
            return PipelineConfig.from_dict(json.load(f))


class VoxelBinding:
    """Cached voxel-to-node blend for warping voxel centers each frame.

    Voxels farther than 4 sigma from every node are treated as unobserved
    and skipped. Valid until the graph is rebuilt.
    """

    def __init__(self, volume: fusion.TsdfVolume, graph: DeformationGraph):
        centers = volume.voxel_centers()
        d, _ = graph.tree().query(centers, k=1)
        self.flat_indices = np.flatnonzero(d <= 4.0 * graph.sigma)
        self.centers = centers[self.flat_indices]
        self.ids, self.weights = defgraph.bind_points(graph, self.centers)

    def warped_centers(self, graph: DeformationGraph) -> np.ndarray:
        return defgraph.warp_points(graph, self.centers, (self.ids, self.weights))


@dataclass
class SourceBinding:
    """Canonical-mesh vertices prepared for the solver."""

    vertices: np.ndarray
    normals: np.ndarray
    node_ids: np.ndarray
    node_weights: np.ndarray
    bone_weights: np.ndarray
    nearest_puppet_vertex: np.ndarray


def bind_sources(mesh: TriangleMesh, graph: DeformationGraph,
                 canonical_puppet_vertices: np.ndarray, puppet_weights: np.ndarray,
                 max_sources: int) -> SourceBinding:
    verts = mesh.vertices
    norms = mesh.normals
    if max_sources and len(verts) > max_sources:
        stride = int(np.ceil(len(verts) / max_sources))
        verts = verts[::stride]
        norms = norms[::stride]
    ids, w = defgraph.bind_points(graph, verts)
    from scipy.spatial import cKDTree

    _, nn = cKDTree(canonical_puppet_vertices).query(verts)
    return SourceBinding(verts, norms, ids, w, puppet_weights[nn], nn)


class Reconstructor:
    """Holds all per-sequence state for the incremental reconstruction."""

    def __init__(self, config: PipelineConfig, topology: SkeletonTopology = None,
                 puppet: puppet_mod.PuppetMesh = None):
        self.config = config
        self.topology = topology or default_topology()
        self.puppet = puppet or puppet_mod.generate_procedural_puppet(self.topology)
        self.sequence = synth.Sequence.open(config.sequence_dir)
        self.n_frames = self.sequence.n_frames
        if config.max_frames:
            self.n_frames = min(self.n_frames, config.max_frames)
        self.diagnostics = []
        self.sigma_p = self.puppet.mean_edge_length()

    # -- bootstrap ---------------------------------------------------------

    def bootstrap(self):
        """Seed canonical model, graph, puppet alignment and pose on frame 0."""
        cfg = self.config
        seq = self.sequence
        intr = seq.intrinsics
        depth0 = seq.depth_meters(0)
        cloud0 = correspond.backproject(depth0, intr)
        if not cloud0.valid.any():
            raise NoCorrespondences("first frame is empty")

        self.volume = fusion.TsdfVolume.around_points(
            cloud0.valid_points, cfg.fusion.voxel_size
        )
        self.volume.truncation = cfg.fusion.truncation_voxels * cfg.fusion.voxel_size
        fusion.integrate_frame(self.volume, depth0, intr, max_weight=cfg.fusion.max_weight)
        self.canonical_mesh = fusion.extract_mesh(self.volume)

        joints0 = seq.joints(0)
        rest_obs = JointObservations(rest_joint_positions(self.topology))
        self.aligned = puppet_mod.align_to_frame(
            self.puppet, self.topology, rest_obs, joints0, cloud0, intr,
            frame_index=0,
            dist_threshold=cfg.solver.dist_threshold,
            normal_threshold=cfg.solver.normal_threshold,
        )
        # Canonical-space puppet: anchors mediation and skinning-weight lookups.
        self.canonical_puppet_vertices = self.aligned.vertices.copy()
        self.pose_ref = fit_pose_to_joints(
            self.topology, Pose.identity(self.topology.n_joints), joints0
        )
        self.pose = self.pose_ref.copy()

        self._build_graph_from_canonical()
        self.prev_joints = joints0
        return cloud0

    def _build_graph_from_canonical(self, previous_graph: DeformationGraph = None):
        cfg = self.config
        self.graph = defgraph.build_graph(
            self.canonical_mesh.vertices,
            cfg.graph.node_spacing,
            cfg.graph.arap_neighbors,
            cfg.graph.blend_k,
        )
        if previous_graph is not None:
            # Carry the existing warp onto the fresh nodes.
            carrier = puppet_mod.PuppetWarpField(
                anchors=previous_graph.positions,
                affine_rot=previous_graph.rotations,
                affine_t=previous_graph.translations,
                sigma=previous_graph.sigma,
                k=min(previous_graph.blend_k, previous_graph.n_nodes),
            )
            for i, t in enumerate(carrier.query(self.graph.positions)):
                self.graph.set_node_transform(i, t)
        from scipy.spatial import cKDTree

        _, nn = cKDTree(self.canonical_puppet_vertices).query(self.graph.positions)
        self.node_bone_weights = self.puppet.weights[nn]
        self.voxel_binding = VoxelBinding(self.volume, self.graph)
        self.graph_build_area = self.canonical_mesh.surface_area()
        self.sources = bind_sources(
            self.canonical_mesh, self.graph, self.canonical_puppet_vertices,
            self.puppet.weights, self.config.max_sources,
        )

    # -- per-frame ---------------------------------------------------------

    def solver_config(self) -> SolverConfig:
        cfg = dataclasses.replace(self.config.solver)
        cfg.weights = dataclasses.replace(self.config.solver.weights)
        cfg.use_mediated = self.config.mediated_correspondences
        if not self.config.skeleton_term:
            # Without the skeleton, the graph-to-skeleton coupling is
            # meaningless too: drop both terms and keep the pose frozen.
            cfg.weights.skeleton = 0.0
            cfg.weights.reg = 0.0
        return cfg

    def frame_data(self, cloud, intr) -> FrameData:
        return FrameData(
            cloud=cloud,
            intrinsics=intr,
            source_vertices=self.sources.vertices,
            source_normals=self.sources.normals,
            source_node_ids=self.sources.node_ids,
            source_node_weights=self.sources.node_weights,
            source_bone_weights=self.sources.bone_weights,
            topology=self.topology,
            pose_ref=self.pose_ref,
            node_bone_weights=self.node_bone_weights,
            nearest_puppet_vertex=self.sources.nearest_puppet_vertex,
            puppet_joint_region=self.puppet.joint_region,
            aligned_vertices=self.aligned.vertices,
            aligned_normals=self.aligned.normals,
        )

    def track_frame(self, index: int, iteration_callback=None):
        """Align puppet, initialize, solve, and fuse one frame."""
        cfg = self.config
        seq = self.sequence
        intr = seq.intrinsics
        depth = seq.depth_meters(index)
        cloud = correspond.backproject(depth, intr)
        joints = seq.joints(index)

        prev_aligned_vertices = self.aligned.vertices
        prev_transforms = self.aligned.bone_transforms
        self.aligned = puppet_mod.align_to_frame(
            self.puppet, self.topology, self.prev_joints, joints, cloud, intr,
            prev_transforms=prev_transforms, frame_index=index,
            dist_threshold=cfg.solver.dist_threshold,
            normal_threshold=cfg.solver.normal_threshold,
        )

        if cfg.puppet_init:
            deltas = [
                cur.compose(prev.inverse())
                for cur, prev in zip(self.aligned.bone_transforms, prev_transforms)
            ]
            fld = puppet_mod.PuppetWarpField.from_bone_transforms(
                prev_aligned_vertices, self.puppet.weights, deltas, self.sigma_p
            )
            defgraph.initialize_from_puppet(self.graph, fld)

        if cfg.skeleton_term:
            self.pose = fit_pose_to_joints(self.topology, self.pose, joints)

        self.pose, report = solver.solve_gauss_newton(
            self.graph, self.pose, self.frame_data(cloud, intr),
            self.solver_config(), iteration_callback=iteration_callback,
        )
        for row in report.rows:
            self.diagnostics.append({"frame": index, **row})

        fusion.integrate_frame(
            self.volume, depth, intr,
            warped_centers=self.voxel_binding.warped_centers(self.graph),
            flat_indices=self.voxel_binding.flat_indices,
            max_weight=cfg.fusion.max_weight,
        )
        new_mesh = fusion.extract_mesh(self.volume)
        self.canonical_mesh = new_mesh
        if new_mesh.surface_area() > (1.0 + cfg.rebuild_area_fraction) * self.graph_build_area:
            self._build_graph_from_canonical(previous_graph=self.graph)
        else:
            self.sources = bind_sources(
                new_mesh, self.graph, self.canonical_puppet_vertices,
                self.puppet.weights, cfg.max_sources,
            )
        self.prev_joints = joints
        return report

    def live_mesh(self) -> TriangleMesh:
        """Canonical surface warped into the current frame."""
        verts = defgraph.warp_points(self.graph, self.canonical_mesh.vertices)
        norms = defgraph.warp_normals(
            self.graph, self.canonical_mesh.vertices, self.canonical_mesh.normals
        )
        return TriangleMesh(verts, norms, self.canonical_mesh.triangles)


def _mesh_out_path(out_dir, i):
    return os.path.join(out_dir, "frame_%05d_mesh.obj" % i)


def write_diagnostics(path, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(DIAGNOSTICS_HEADER)
        for r in rows:
            writer.writerow([
                r["frame"], r["iteration"],
                "%.9e" % r["e_data"], "%.9e" % r["e_arap"],
                "%.9e" % r["e_skeleton"], "%.9e" % r["e_reg"],
                "%.9e" % r["total"], r["n_corr"],
            ])


def run_reconstruct(config: PipelineConfig, topology=None, puppet=None) -> dict:
    """Full pipeline over a sequence; returns a summary dict.

    Writes one live mesh per frame, the final canonical mesh, a diagnostics
    table, and the effective config. Raises synth.SequenceError for malformed
    input; solver failures mid-sequence are reported in the summary with
    partial outputs retained.
    """
    os.makedirs(config.output_dir, exist_ok=True)
    recon = Reconstructor(config, topology=topology, puppet=puppet)
    with open(os.path.join(config.output_dir, "run_config.json"), "w", newline="\n") as f:
        json.dump(config.to_dict(), f, indent=1, default=str)
        f.write("\n")

    recon.bootstrap()
    write_obj(_mesh_out_path(config.output_dir, 0), recon.live_mesh())
    summary = {"frames_completed": 1, "failed_frame": None, "error": None}
    for i in range(1, recon.n_frames):
        try:
            recon.track_frame(i)
        except (NoCorrespondences, SingularSystem) as exc:
            summary["failed_frame"] = i
            summary["error"] = f"{type(exc).__name__}: {exc}"
            break
        write_obj(_mesh_out_path(config.output_dir, i), recon.live_mesh())
        summary["frames_completed"] = i + 1
    write_obj(os.path.join(config.output_dir, "canonical_mesh.obj"), recon.canonical_mesh)
    write_diagnostics(os.path.join(config.output_dir, "diagnostics.csv"), recon.diagnostics)
    if summary["error"]:
        with open(os.path.join(config.output_dir, "FAILED.txt"), "w") as f:
            f.write("frame %d: %s\n" % (summary["failed_frame"], summary["error"]))
    return summary


def run_evaluate(recon_dir, sequence_dir, csv_path=None, max_frames=None) -> list:
    """Pair per-frame meshes with ground truth and compute FrameMetrics rows."""
    seq = synth.Sequence.open(sequence_dir)
    n = seq.n_frames if max_frames is None else min(seq.n_frames, max_frames)
    rows = []
    for i in range(n):
        recon_path = _mesh_out_path(recon_dir, i)
        if not os.path.exists(recon_path):
            raise synth.SequenceError(f"missing {recon_path}")
        from .mesh import read_obj

        recon = read_obj(recon_path)
        gt = seq.gt_mesh(i)
        rows.append(metrics.evaluate_pair(i, recon, gt))
    if csv_path:
        metrics.write_metrics_csv(csv_path, rows)
    return rows


def run_ablation(sequence_dir, out_dir=None, base_config: PipelineConfig = None,
                 frame: int = 1) -> dict:
    """Initialization ablation on one frame pair.

    Case 1 tracks without puppet initialization or mediated correspondences;
    case 2 is the full method. Both report MAE / std / Hausdorff / outliers
    against ground truth after every solver iteration.
    """
    results = {}
    seq = synth.Sequence.open(sequence_dir)
    gt = seq.gt_mesh(frame)
    for case, (init_on, mediated_on) in (("case1", (False, False)), ("case2", (True, True))):
        config = PipelineConfig.from_dict(base_config.to_dict()) if base_config else PipelineConfig()
        config.sequence_dir = str(sequence_dir)
        config.puppet_init = init_on
        config.mediated_correspondences = mediated_on
        config.solver.early_stop = False  # all iterations reported
        recon = Reconstructor(config)
        recon.bootstrap()
        for skip in range(1, frame):
            recon.track_frame(skip)
        rows = []

        def snapshot(it, graph, pose):
            verts = defgraph.warp_points(graph, recon.canonical_mesh.vertices)
            live = TriangleMesh(verts, None, recon.canonical_mesh.triangles)
            mean, std = metrics.mae_point_to_plane(live, gt)
            rows.append({
                "iteration": it + 1,
                "mean_mm": mean,
                "std_mm": std,
                "hausdorff": metrics.hausdorff(live, gt),
                "outliers": metrics.outlier_count(live, gt),
            })

        recon.track_frame(frame, iteration_callback=snapshot)
        results[case] = rows
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["case", "iteration", "mean_mm", "std_mm", "hausdorff", "outliers"])
            for case, rows in results.items():
                for r in rows:
                    writer.writerow([case, r["iteration"], "%.4f" % r["mean_mm"],
                                     "%.4f" % r["std_mm"], "%.6f" % r["hausdorff"], r["outliers"]])
    return results
