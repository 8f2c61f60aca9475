"""Calibration of three or more cameras through the co-observation graph.

Cameras are vertices; an edge carries weight 1/M where M counts markers seen
by both cameras in the same frame. Pairwise calibrations run only along the
shortest-path tree from the reference camera, their poses are chained to the
reference, and a global bundle adjustment refines everything at once.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np

from . import bundle
from .epipolar import Pose
from .errors import (
    CalibrationError,
    CalibrationFailedError,
    InsufficientDataError,
    UnreachableCameraError,
)
from .optim import LmConfig
from .pair_calib import PairCalibration, PairConfig, calibrate_pair, frames_within_tolerance
from .synth import d_rms
from .wand import ObservationTable, WandGeometry, wand_poses_from_points

log = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-12


@dataclass
class VisionGraph:
    cameras: list
    counts: dict  # (i, j) with i < j -> co-observed marker count, only M > 0

    def weight(self, i, j) -> float:
        return 1.0 / self.counts[_key(i, j)]

    def count(self, i, j) -> int:
        return self.counts.get(_key(i, j), 0)

    def neighbours(self, i):
        out = []
        for (a, b) in self.counts:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)

    def reachable(self, start) -> set:
        seen, todo = {start}, [start]
        while todo:
            for n in self.neighbours(todo.pop()):
                if n not in seen:
                    seen.add(n)
                    todo.append(n)
        return seen


def _key(i, j):
    return (i, j) if i < j else (j, i)


@dataclass
class PathTree:
    reference: int
    paths: dict      # camera -> [reference, ..., camera]
    distance: dict

    def parent(self, cam):
        p = self.paths[cam]
        return p[-2] if len(p) > 1 else None

    @property
    def edges(self):
        """Tree edges (parent, child), children in ascending id order."""
        return [(self.parent(c), c) for c in sorted(self.paths) if c != self.reference]


@dataclass
class MultiConfig:
    reference: int = 0
    pair: PairConfig = field(default_factory=PairConfig)
    global_lm: LmConfig = field(default_factory=LmConfig)
    outlier_threshold: float = 0.01
    min_views: int = 2


@dataclass
class MultiCalibration:
    reference: int
    intrinsics: dict
    poses: dict
    e_rms: dict
    d_rms: float
    graph: VisionGraph
    tree: PathTree
    vector: np.ndarray
    frames_used: np.ndarray
    frames_rejected: np.ndarray
    pairs: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    deviations: list = field(default_factory=list)

    @property
    def camera_ids(self):
        return sorted(self.intrinsics)


def build_vision_graph(table: ObservationTable, reference: int | None = None) -> VisionGraph:
    """Count co-observed markers for every camera pair.

    With ``reference`` set, raises UnreachableCameraError when some camera
    has no path to it.
    """
    if len(table.camera_ids) < 2:
        raise InsufficientDataError("need >= 2 cameras", stage="vision_graph")
    vis = table.visible
    counts = {}
    cams = table.camera_ids
    for a in range(len(cams)):
        for b in range(a + 1, len(cams)):
            m = int(np.count_nonzero(vis[:, a] & vis[:, b]))
            if m:
                counts[_key(cams[a], cams[b])] = m
    graph = VisionGraph(list(cams), counts)
    if reference is not None:
        _check_reachable(graph, reference)
    return graph


def _check_reachable(graph: VisionGraph, reference):
    if reference not in graph.cameras:
        raise UnreachableCameraError(f"reference camera {reference} is not in the rig", cameras=[reference])
    cut = sorted(set(graph.cameras) - graph.reachable(reference))
    if cut:
        raise UnreachableCameraError(
            f"cameras {cut} share no markers with the component of camera {reference}",
            cameras=cut, stage="vision_graph")


def shortest_paths(graph: VisionGraph, reference: int) -> PathTree:
    """Dijkstra from the reference camera.

    Equal-cost alternatives (relative tolerance 1e-12) resolve to the
    lexicographically smaller vertex sequence.
    """
    _check_reachable(graph, reference)
    dist = {reference: 0.0}
    paths = {reference: [reference]}
    done = set()
    heap = [(0.0, [reference])]
    while heap:
        d, path = heapq.heappop(heap)
        u = path[-1]
        if u in done or path != paths[u]:
            continue
        done.add(u)
        for v in graph.neighbours(u):
            if v in done:
                continue
            nd = d + graph.weight(u, v)
            candidate = path + [v]
            if v not in dist or _better(nd, candidate, dist[v], paths[v]):
                dist[v], paths[v] = nd, candidate
                heapq.heappush(heap, (nd, candidate))
    return PathTree(reference, paths, dist)


def _better(d_new, p_new, d_old, p_old):
    if abs(d_new - d_old) <= TIE_TOLERANCE * max(d_new, d_old):
        return p_new < p_old
    return d_new < d_old


def chain_transform(pose_ij: Pose, pose_jk: Pose) -> Pose:
    """Compose i->j with j->k: R_ik = R_jk R_ij, T_ik = R_jk T_ij + T_jk."""
    R_jk = pose_jk.R
    return Pose.from_matrix(R_jk @ pose_ij.R, R_jk @ pose_ij.t + pose_jk.t)


def chain_path(pair_poses: dict, path) -> Pose:
    """Pose of path[-1] relative to path[0] from per-edge poses keyed (parent, child)."""
    pose = Pose.identity()
    for a, b in zip(path[:-1], path[1:]):
        pose = chain_transform(pose, pair_poses[(a, b)])
    return pose


def _seed_intrinsics(tree: PathTree, graph: VisionGraph, pairs: dict) -> dict:
    """Each camera takes intrinsics from its incident tree edge with the most co-observations."""
    best = {}
    for (a, b), result in pairs.items():
        m = graph.count(a, b)
        for cam, partner in ((a, b), (b, a)):
            rank = (-m, partner)
            if cam not in best or rank < best[cam][0]:
                best[cam] = (rank, result.intrinsics[cam])
    return {cam: v[1] for cam, v in best.items()}


def _global_frames(table: ObservationTable, min_views: int):
    """Frames where at least ``min_views`` cameras see the whole wand."""
    return np.count_nonzero(table.full_view, axis=1) >= min_views


def global_adjust(table: ObservationTable, wand: WandGeometry, metas: dict, intrinsics: dict,
                  poses: dict, reference: int, cfg: MultiConfig):
    """Triangulate, reject by wand length, then bundle-adjust all cameras together.

    Returns (layout, y, wand_poses, used_table, rejected_ids, reports).
    """
    frames = table.select_frames(_global_frames(table, cfg.min_views))
    if len(frames) == 0:
        raise InsufficientDataError("no frame shows the whole wand in two cameras", stage="global")
    P = bundle.triangulate_table(intrinsics, poses, frames, cfg.min_views)
    keep = frames_within_tolerance(P, wand, cfg.outlier_threshold)
    if not keep.any():
        raise CalibrationFailedError("every frame failed the wand-length check", stage="global")
    used = frames.select_frames(keep)
    rejected = frames.frame_ids[~keep]
    wand_poses = wand_poses_from_points(P[keep, 0], P[keep, 2])

    layout = bundle.RigLayout(table.camera_ids, reference, cfg.pair.pixel_pitch)
    y0 = layout.pack(intrinsics, poses)
    blocks = bundle.ReprojectionBlocks.from_table(used)
    rms0 = bundle.rms_by_camera(layout, y0, wand_poses, wand, blocks)
    y, wand_poses, report = bundle.bundle_adjust(layout, y0, wand_poses, wand, blocks, cfg.global_lm,
                                                 stage="global:bundle_adjustment")
    return layout, y, wand_poses, used, rejected, {"bundle": report, "e_rms_initial": rms0, "blocks": blocks}


def calibrate_multi(table: ObservationTable, wand: WandGeometry, metas, cfg: MultiConfig | None = None
                    ) -> MultiCalibration:
    """Calibrate every camera in ``table`` relative to ``cfg.reference``."""
    cfg = cfg or MultiConfig()
    metas = metas if isinstance(metas, dict) else {m.id: m for m in metas}
    graph = build_vision_graph(table, cfg.reference)
    tree = shortest_paths(graph, cfg.reference)

    pairs: dict[tuple, PairCalibration] = {}
    for parent, child in tree.edges:
        try:
            pairs[(parent, child)] = calibrate_pair(table.pair(parent, child), wand, metas, cfg.pair)
        except CalibrationError as exc:
            exc.stage = f"pair {parent}-{child}: {exc.stage or 'pair'}"
            raise
    edge_poses = {edge: res.pose for edge, res in pairs.items()}
    poses = {c: chain_path(edge_poses, tree.paths[c]) for c in table.camera_ids}
    poses[cfg.reference] = Pose.identity()
    intrinsics = _seed_intrinsics(tree, graph, pairs)

    layout, y, wand_poses, used, rejected, reports = global_adjust(
        table, wand, metas, intrinsics, poses, cfg.reference, cfg)
    theta_max = {c: metas[c].theta_max for c in table.camera_ids}
    intr, final_poses = layout.unpack(y, theta_max)
    final_poses[cfg.reference] = Pose.identity()
    blocks = reports.pop("blocks")
    e_rms = bundle.rms_by_camera(layout, y, wand_poses, wand, blocks)
    P = bundle.triangulate_table(intr, final_poses, used, cfg.min_views)
    reports["chained_poses"] = poses
    return MultiCalibration(
        reference=cfg.reference,
        intrinsics=intr,
        poses=final_poses,
        e_rms=e_rms,
        d_rms=d_rms(wand, P[:, 0], P[:, 2]),
        graph=graph,
        tree=tree,
        vector=y,
        frames_used=used.frame_ids.copy(),
        frames_rejected=rejected,
        pairs=pairs,
        reports=reports,
        deviations=["gauge_fix_mu"] if cfg.pair.pixel_pitch == "vertical" else [],
    )


def calibrate(table: ObservationTable, wand: WandGeometry, metas, cfg: MultiConfig | None = None
              ) -> MultiCalibration:
    """Dispatch on camera count: a pair runs the two-camera pipeline, more cameras the graph one."""
    cfg = cfg or MultiConfig()
    metas = metas if isinstance(metas, dict) else {m.id: m for m in metas}
    if len(table.camera_ids) < 2:
        raise InsufficientDataError("need >= 2 cameras", stage="input")
    if len(table.camera_ids) > 2:
        return calibrate_multi(table, wand, metas, cfg)
    if cfg.reference not in table.camera_ids:
        raise UnreachableCameraError(f"reference camera {cfg.reference} is not in the rig",
                                     cameras=[cfg.reference])
    other = next(c for c in table.camera_ids if c != cfg.reference)
    ordered = table.select_cameras([cfg.reference, other])
    graph = build_vision_graph(ordered, cfg.reference)
    tree = shortest_paths(graph, cfg.reference)
    res = calibrate_pair(ordered, wand, metas, cfg.pair)
    poses = {cfg.reference: Pose.identity(), other: res.pose}
    layout = bundle.RigLayout(ordered.camera_ids, cfg.reference, cfg.pair.pixel_pitch)
    used = ordered.pair(cfg.reference, other)
    used = used.select_frames(np.isin(used.frame_ids, res.inlier_frames))
    P = bundle.triangulate_table(res.intrinsics, poses, used)
    return MultiCalibration(
        reference=cfg.reference,
        intrinsics=res.intrinsics,
        poses=poses,
        e_rms=res.e_rms,
        d_rms=d_rms(wand, P[:, 0], P[:, 2]),
        graph=graph,
        tree=tree,
        vector=layout.pack(res.intrinsics, poses),
        frames_used=res.inlier_frames,
        frames_rejected=res.rejected_frames,
        pairs={(cfg.reference, other): res},
        reports=res.reports,
        deviations=res.deviations,
    )
