"""Rig parameter layout and the wand reprojection residual used by bundle adjustment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera_model import (
    PARAM_NAMES,
    CameraIntrinsics,
    project_points,
    project_with_jacobians,
    unproject_points,
)
from .epipolar import Pose
from .optim import BlockSparseProblem, LmConfig, sparse_lm_minimize
from .rotation import rodrigues, rotate_jacobian
from .triangulation import triangulate_points
from .wand import ObservationTable, WandGeometry, wand_markers

PIXEL_PITCH_MODES = ("vertical", "all", "none")


class RigLayout:
    """Full rig vector: 9 intrinsics per camera, then 6 pose entries per non-reference camera.

    For m+1 cameras the vector has 15m + 9 entries. ``pixel_pitch`` selects
    which pixel densities are optimised: "vertical" holds every mu at its
    datasheet value (removing the k / pixel-pitch scale ambiguity), "all"
    frees both, "none" holds both.
    """

    def __init__(self, camera_ids, reference, pixel_pitch="vertical", fix_higher_order=False):
        if pixel_pitch not in PIXEL_PITCH_MODES:
            raise ValueError(f"pixel_pitch must be one of {PIXEL_PITCH_MODES}")
        self.camera_ids = [int(c) for c in camera_ids]
        self.reference = int(reference)
        self.pixel_pitch = pixel_pitch
        self.posed = [c for c in self.camera_ids if c != self.reference]
        n_cam = len(self.camera_ids)
        self.size = 9 * n_cam + 6 * len(self.posed)
        names = []
        for c in self.camera_ids:
            names += [f"cam{c}.{n}" for n in PARAM_NAMES]
        for c in self.posed:
            names += [f"cam{c}.r{i}" for i in range(3)] + [f"cam{c}.t{i}" for i in range(3)]
        self.names = names
        fixed = set()
        for i, _ in enumerate(self.camera_ids):
            if pixel_pitch in ("vertical", "none"):
                fixed.add(9 * i + 2)
            if pixel_pitch == "none":
                fixed.add(9 * i + 3)
            if fix_higher_order:
                fixed.update(9 * i + j for j in (6, 7, 8))
        self.free_index = np.array([i for i in range(self.size) if i not in fixed], dtype=int)

    @property
    def free_names(self):
        return [self.names[i] for i in self.free_index]

    def intrinsics_slice(self, cam):
        i = self.camera_ids.index(cam)
        return slice(9 * i, 9 * i + 9)

    def pose_slice(self, cam):
        i = self.posed.index(cam)
        base = 9 * len(self.camera_ids) + 6 * i
        return slice(base, base + 6)

    def pack(self, intrinsics: dict, poses: dict) -> np.ndarray:
        y = np.zeros(self.size)
        for c in self.camera_ids:
            y[self.intrinsics_slice(c)] = intrinsics[c].to_vector()
        for c in self.posed:
            y[self.pose_slice(c)] = poses[c].to_vector()
        return y

    def unpack(self, y, theta_max: dict):
        intr = {c: CameraIntrinsics.from_vector(y[self.intrinsics_slice(c)], theta_max[c])
                for c in self.camera_ids}
        poses = {c: Pose.identity() for c in self.camera_ids}
        for c in self.posed:
            poses[c] = Pose.from_vector(y[self.pose_slice(c)])
        return intr, poses

    def expand(self, free, base):
        y = np.array(base, dtype=float)
        y[self.free_index] = free
        return y

    def pose_vector(self, y, cam):
        if cam == self.reference:
            return np.zeros(6)
        return y[self.pose_slice(cam)]


@dataclass
class ReprojectionBlocks:
    """One block per (frame, camera) with at least one visible marker."""

    point_index: np.ndarray   # (B,) row into the wand-pose array
    camera: np.ndarray        # (B,) camera id
    pixels: np.ndarray        # (B, 3, 2), NaN where unseen
    mask: np.ndarray          # (B, 3) booleans

    @classmethod
    def from_table(cls, table: ObservationTable, frame_rows=None) -> "ReprojectionBlocks":
        """Blocks for the table's frames; ``frame_rows`` maps table frames to pose rows."""
        vis = table.visible
        rows = np.arange(len(table)) if frame_rows is None else np.asarray(frame_rows)
        fi, ci = np.nonzero(np.any(vis, axis=2))
        cams = np.array(table.camera_ids)[ci]
        return cls(rows[fi], cams, table.pixels[fi, ci], vis[fi, ci])

    def __len__(self):
        return len(self.point_index)


def reprojection_residuals(layout: RigLayout, y, poses, wand: WandGeometry,
                           blocks: ReprojectionBlocks, jacobian=False):
    """Residuals (B, 6) = predicted - observed pixels, zero for unseen markers.

    With ``jacobian`` also returns d/dy (B, 6, layout.size) and d/dpose (B, 6, 5).
    """
    B = len(blocks)
    res = np.zeros((B, 3, 2))
    Jy = np.zeros((B, 3, 2, layout.size)) if jacobian else None
    Jp = np.zeros((B, 3, 2, 5)) if jacobian else None
    if jacobian:
        X, dX = wand_markers(poses, wand, jacobian=True)
    else:
        X = wand_markers(poses, wand)
    weight = blocks.mask[..., None].astype(float)
    observed = np.where(blocks.mask[..., None], blocks.pixels, 0.0)
    for cam in np.unique(blocks.camera):
        sel = np.flatnonzero(blocks.camera == cam)
        params = y[layout.intrinsics_slice(cam)]
        pv = layout.pose_vector(y, cam)
        R, t = rodrigues(pv[:3]), pv[3:]
        Xw = X[blocks.point_index[sel]]                 # (b, 3, 3)
        Y = Xw @ R.T + t
        if not jacobian:
            uv = project_points(params, Y)
            res[sel] = (uv - observed[sel]) * weight[sel]
            continue
        uv, dY, dpar = project_with_jacobians(params, Y)
        res[sel] = (uv - observed[sel]) * weight[sel]
        w = weight[sel][..., None]
        Jy[sel, :, :, layout.intrinsics_slice(cam)] = dpar * w
        if cam != layout.reference:
            ps = layout.pose_slice(cam)
            dY_dr = rotate_jacobian(pv[:3], Xw)          # (b, 3, 3, 3)
            Jy[sel, :, :, ps.start:ps.start + 3] = np.einsum("bmij,bmjk->bmik", dY, dY_dr) * w
            Jy[sel, :, :, ps.start + 3:ps.stop] = dY * w
        dYp = np.einsum("ij,bmjk->bmik", R, dX[blocks.point_index[sel]])
        Jp[sel] = np.einsum("bmij,bmjk->bmik", dY, dYp) * w
    res = res.reshape(B, 6)
    if not jacobian:
        return res
    return res, Jy.reshape(B, 6, layout.size), Jp.reshape(B, 6, 5)


def reprojection_problem(layout: RigLayout, y_base, wand, blocks: ReprojectionBlocks,
                         n_points: int) -> BlockSparseProblem:
    free = layout.free_index

    def evaluate(cam_free, poses, jac):
        y = layout.expand(cam_free, y_base)
        if not jac:
            return reprojection_residuals(layout, y, poses, wand, blocks), None, None
        r, Jy, Jp = reprojection_residuals(layout, y, poses, wand, blocks, jacobian=True)
        return r, Jy[:, :, free], Jp

    return BlockSparseProblem(len(free), n_points, 5, blocks.point_index, evaluate,
                              camera_names=layout.free_names)


def bundle_adjust(layout: RigLayout, y0, poses0, wand, blocks, cfg: LmConfig | None = None,
                  stage="bundle_adjustment"):
    """Jointly refine the free rig parameters and the wand poses.

    Returns (y, poses, LmReport).
    """
    problem = reprojection_problem(layout, y0, wand, blocks, len(poses0))
    x0 = np.concatenate([y0[layout.free_index], np.asarray(poses0, float).ravel()])
    x, report = sparse_lm_minimize(problem, x0, cfg, stage=stage)
    cam, poses = problem.split(x)
    return layout.expand(cam, y0), poses.copy(), report


def rms_by_camera(layout, y, poses, wand, blocks) -> dict:
    """Per-camera RMS of the Euclidean pixel error over visible markers."""
    res = reprojection_residuals(layout, y, poses, wand, blocks).reshape(-1, 3, 2)
    out = {}
    for cam in layout.camera_ids:
        sel = blocks.camera == cam
        if not np.any(sel):
            continue
        sq = np.sum(res[sel] ** 2, axis=-1)[blocks.mask[sel]]
        out[cam] = float(np.sqrt(np.mean(sq)))
    return out


def triangulate_table(intrinsics: dict, poses: dict, table: ObservationTable,
                      min_views: int = 2):
    """n-view triangulation of every marker seen by >= min_views cameras.

    Returns points (F, 3, 3) in the reference frame; NaN where unobservable.
    """
    F = len(table)
    cams = table.camera_ids
    V = len(cams)
    bearings = np.zeros((V, F * 3, 3))
    valid = np.zeros((V, F * 3), dtype=bool)
    for vi, cam in enumerate(cams):
        intr = intrinsics[cam]
        pix = table.pixels[:, vi].reshape(-1, 2)
        ok = np.all(np.isfinite(pix), axis=1)
        m = np.zeros((F * 3, 3))
        if ok.any():
            m[ok] = unproject_points(intr.to_vector(), pix[ok], intr.theta_max)
        ok &= np.all(np.isfinite(m), axis=1)
        bearings[vi] = np.where(ok[:, None], m, [0.0, 0.0, 1.0])
        valid[vi] = ok
    R = np.stack([poses[c].R for c in cams])
    t = np.stack([poses[c].t for c in cams])
    X = triangulate_points(bearings, R, t, mask=valid)
    X[valid.sum(axis=0) < min_views] = np.nan
    return X.reshape(F, 3, 3)


def length_errors(points, wand: WandGeometry):
    """Relative error (L - |A - C|) / L per frame from points (F, 3, 3)."""
    d = np.linalg.norm(points[:, 0] - points[:, 2], axis=1)
    return (wand.L - d) / wand.L
