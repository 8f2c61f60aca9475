"""Two-camera wand calibration.

The pipeline seeds intrinsics from the datasheet, initialises the relative
pose from the essential matrix and the wand length, refines 18 parameters
against the three marker distances of every frame, drops frames whose
reconstructed wand length is off by more than 1%, and finishes with a sparse
bundle adjustment over 24 camera parameters plus one 5-parameter wand pose
per frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import bundle
from .camera_model import CameraIntrinsics, CameraMeta, default_intrinsics, unproject_points, unproject_with_jacobian
from .epipolar import CorrespondenceSet, Pose, RansacConfig, decompose_essential, estimate_essential_ransac
from .errors import CalibrationError, CalibrationFailedError, InsufficientDataError
from .optim import LmConfig, LmReport, ResidualProblem, lm_minimize
from .rotation import rodrigues, rotation_derivatives
from .triangulation import _E_CROSS, recover_scale, selection_matrices, triangulate_points, triangulate_with_derivatives
from .wand import ObservationTable, WandGeometry, wand_poses_from_points

log = logging.getLogger(__name__)

# Step-3 state: (k1, k2, mu, mv, u0, v0) for each camera, then r (3) and t (3)
STATE18_NAMES = [f"cam{i}.{n}" for i in (0, 1) for n in ("k1", "k2", "mu", "mv", "u0", "v0")] + \
    ["r0", "r1", "r2", "t0", "t1", "t2"]


@dataclass
class PairConfig:
    min_frames: int = 30
    ransac: RansacConfig = field(default_factory=RansacConfig)
    distance_lm: LmConfig = field(default_factory=LmConfig)
    bundle_lm: LmConfig = field(default_factory=LmConfig)
    pixel_pitch: str = "vertical"
    outlier_threshold: float = 0.01
    jacobian: str = "analytic"


@dataclass
class PairCalibration:
    cameras: tuple[int, int]
    intrinsics: dict
    pose: Pose
    e_rms: dict
    inlier_frames: np.ndarray
    rejected_frames: np.ndarray
    wand_poses: np.ndarray
    reports: dict = field(default_factory=dict)
    deviations: list = field(default_factory=list)

    @property
    def state24(self) -> np.ndarray:
        c0, c1 = self.cameras
        return np.concatenate([self.intrinsics[c0].to_vector(), self.intrinsics[c1].to_vector(),
                               self.pose.to_vector()])


def _stage(name):
    """Tag CalibrationErrors raised inside a pipeline step with the step name."""
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except CalibrationError as exc:
                if exc.stage is None:
                    exc.stage = name
                raise
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        inner.__wrapped__ = fn
        return inner
    return wrap


def _pair_pixels(table: ObservationTable):
    if len(table.camera_ids) != 2:
        raise ValueError("pair calibration needs a two-camera observation table")
    return table.pixels[:, 0], table.pixels[:, 1]


# ---------------------------------------------------------------------------
# step 2
# ---------------------------------------------------------------------------

def correspondences(intr0: CameraIntrinsics, intr1: CameraIntrinsics, table: ObservationTable):
    pix0, pix1 = _pair_pixels(table)
    m0 = unproject_points(intr0.to_vector(), pix0.reshape(-1, 2), intr0.theta_max)
    m1 = unproject_points(intr1.to_vector(), pix1.reshape(-1, 2), intr1.theta_max)
    frames = np.repeat(table.frame_ids, 3)
    labels = np.tile(np.arange(3), len(table))
    ok = np.all(np.isfinite(m0), axis=1) & np.all(np.isfinite(m1), axis=1)
    return CorrespondenceSet(m0[ok], m1[ok], frames[ok], labels[ok]), ok


@_stage("step2:init_extrinsics")
def init_extrinsics(intr0: CameraIntrinsics, intr1: CameraIntrinsics, table: ObservationTable,
                    wand: WandGeometry, ransac: RansacConfig | None = None,
                    info: dict | None = None) -> Pose:
    """Relative pose from RANSAC on the essential matrix, scaled by the wand length."""
    corrs, ok = correspondences(intr0, intr1, table)
    if len(corrs) < 8 or len(np.unique(corrs.frame_ids)) < 3:
        raise InsufficientDataError("need >= 8 usable correspondences over >= 3 frames")
    E, mask = estimate_essential_ransac(corrs, ransac)
    unit = decompose_essential(E, corrs.subset(mask))

    inlier = np.zeros(len(ok), dtype=bool)
    inlier[np.flatnonzero(ok)[mask]] = True
    inlier = inlier.reshape(-1, 3)
    use = inlier[:, 0] & inlier[:, 2]
    if not use.any():
        use = np.ones(len(table), dtype=bool)
    pix0, pix1 = _pair_pixels(table)
    R = unit.R
    bear = lambda intr, pix: unproject_points(intr.to_vector(), pix.reshape(-1, 2), intr.theta_max)
    m0 = bear(intr0, pix0[use][:, [0, 2]])
    m1 = bear(intr1, pix1[use][:, [0, 2]])
    X = triangulate_points(np.stack([m0, m1]), np.stack([np.eye(3), R]),
                           np.stack([np.zeros(3), unit.t])).reshape(-1, 2, 3)
    good = np.all(np.isfinite(X), axis=(1, 2))
    lam = recover_scale(wand.L, X[good, 0], X[good, 1])
    if info is not None:
        info.update(essential=E, inlier_mask=mask, ransac_inliers=int(mask.sum()),
                    scale=lam, scale_frames=int(good.sum()))
    return Pose(unit.r, lam * unit.t)


# ---------------------------------------------------------------------------
# step 3
# ---------------------------------------------------------------------------

def state18(intr0: CameraIntrinsics, intr1: CameraIntrinsics, pose: Pose) -> np.ndarray:
    return np.concatenate([intr0.to_vector()[:6], intr1.to_vector()[:6], pose.to_vector()])


def _params9(six):
    return np.concatenate([six, np.zeros(3)])


def _two_view_system(m0, m1, r, t):
    """Design matrices A (N, 4, 4) and dA along (m0, m1, r, t) directions (N, 12, 4, 4)."""
    N = len(m0)
    R = rodrigues(r)
    dR = rotation_derivatives(r)
    Q1 = np.concatenate([R, t[:, None]], axis=1)
    S0, rows0 = selection_matrices(m0)
    S1, rows1 = selection_matrices(m1)
    A = np.zeros((N, 4, 4))
    A[:, 0:2, 0:3] = S0
    A[:, 2:4] = S1 @ Q1
    dA = np.zeros((N, 12, 4, 4))
    for i in range(3):
        dS0 = np.take_along_axis(np.broadcast_to(_E_CROSS[i], (N, 3, 3)), rows0[..., None], axis=1)
        dS1 = np.take_along_axis(np.broadcast_to(_E_CROSS[i], (N, 3, 3)), rows1[..., None], axis=1)
        dA[:, i, 0:2, 0:3] = dS0
        dA[:, 3 + i, 2:4] = dS1 @ Q1
        dA[:, 6 + i, 2:4, 0:3] = S1 @ dR[i]
        dA[:, 9 + i, 2:4, 3] = S1[:, :, i]
    return A, dA


def _reconstruct(x, pix0, pix1, theta_max, jacobian):
    """Markers (F, 3, 3) triangulated from state x; with jacobian also d/dx (F, 3, 3, 18)."""
    F = len(pix0)
    p0, p1 = _params9(x[0:6]), _params9(x[6:12])
    r, t = x[12:15], x[15:18]
    if not jacobian:
        m0 = unproject_points(p0, pix0.reshape(-1, 2), theta_max[0])
        m1 = unproject_points(p1, pix1.reshape(-1, 2), theta_max[1])
        bad = ~(np.all(np.isfinite(m0), axis=1) & np.all(np.isfinite(m1), axis=1))
        m0[bad] = m1[bad] = [0.0, 0.0, 1.0]
        X = triangulate_points(np.stack([m0, m1]), np.stack([np.eye(3), rodrigues(r)]),
                               np.stack([np.zeros(3), t]))
        X[bad] = np.nan
        return X.reshape(F, 3, 3)
    m0, dm0 = unproject_with_jacobian(p0, pix0.reshape(-1, 2), theta_max[0])
    m1, dm1 = unproject_with_jacobian(p1, pix1.reshape(-1, 2), theta_max[1])
    A, dA = _two_view_system(m0, m1, r, t)
    X, dX = triangulate_with_derivatives(A, dA)          # dX (N, 3, 12)
    J = np.zeros((len(X), 3, 18))
    J[:, :, 0:6] = dX[:, :, 0:3] @ dm0[:, :, :6]
    J[:, :, 6:12] = dX[:, :, 3:6] @ dm1[:, :, :6]
    J[:, :, 12:18] = dX[:, :, 6:12]
    return X.reshape(F, 3, 3), J.reshape(F, 3, 3, 18)


def distance_residuals(x, table: ObservationTable, wand: WandGeometry, theta_max=(np.pi / 2,) * 2,
                       jacobian=False):
    """Wand length errors (L1 - |A-B|, L2 - |B-C|, L - |A-C|) per frame, flattened.

    The markers are re-triangulated from the current state on every call.
    """
    pix0, pix1 = _pair_pixels(table)
    out = _reconstruct(np.asarray(x, float), pix0, pix1, theta_max, jacobian)
    P, dP = out if jacobian else (out, None)
    pairs = ((0, 1, wand.L1), (1, 2, wand.L2), (0, 2, wand.L))
    res = np.empty((len(P), 3))
    J = np.empty((len(P), 3, 18)) if jacobian else None
    for k, (i, j, length) in enumerate(pairs):
        d = P[:, i] - P[:, j]
        n = np.linalg.norm(d, axis=1)
        res[:, k] = length - n
        if jacobian:
            J[:, k] = -np.einsum("fa,fab->fb", d / n[:, None], dP[:, i] - dP[:, j])
    if jacobian:
        return res.ravel(), J.reshape(-1, 18)
    return res.ravel()


def _free_state_index(pixel_pitch):
    fixed = set()
    if pixel_pitch in ("vertical", "none"):
        fixed |= {2, 8}
    if pixel_pitch == "none":
        fixed |= {3, 9}
    return np.array([i for i in range(18) if i not in fixed])


@_stage("step3:optimize_distances")
def optimize_distances(x0, table: ObservationTable, wand: WandGeometry, cfg: PairConfig | None = None,
                       theta_max=(np.pi / 2,) * 2):
    """Minimise the summed squared wand-length errors over the 18-vector state.

    Returns (x, LmReport).
    """
    cfg = cfg or PairConfig()
    x0 = np.asarray(x0, dtype=float)
    free = _free_state_index(cfg.pixel_pitch)

    def full(z):
        x = x0.copy()
        x[free] = z
        return x

    def residual(z):
        return distance_residuals(full(z), table, wand, theta_max)

    def jac(z):
        return distance_residuals(full(z), table, wand, theta_max, jacobian=True)[1][:, free]

    lm = cfg.distance_lm
    if cfg.jacobian == "numeric":
        lm = LmConfig(**{**lm.__dict__, "jacobian": "numeric"})
    problem = ResidualProblem(residual, jac, [(STATE18_NAMES[i], 1) for i in free])
    z, report = lm_minimize(problem, x0[free], lm, stage="step3:optimize_distances")
    return full(z), report


# ---------------------------------------------------------------------------
# step 4
# ---------------------------------------------------------------------------

def frames_within_tolerance(points, wand: WandGeometry, threshold=0.01):
    """Keep frames with |L - |A - C|| / L <= threshold (the boundary is kept)."""
    err = np.abs(bundle.length_errors(points, wand))
    return np.isfinite(err) & ~(err > threshold)


@_stage("step4:reject_outliers")
def reject_outliers(x, table: ObservationTable, wand: WandGeometry, threshold=0.01,
                    theta_max=(np.pi / 2,) * 2) -> ObservationTable:
    """Drop frames whose reconstructed wand length is off by more than ``threshold``."""
    pix0, pix1 = _pair_pixels(table)
    P = _reconstruct(np.asarray(x, float), pix0, pix1, theta_max, jacobian=False)
    keep = frames_within_tolerance(P, wand, threshold)
    if not keep.any():
        raise CalibrationFailedError("every frame failed the wand-length check")
    return table.select_frames(keep)


def state24(x18) -> np.ndarray:
    """Extend the 18-vector with zero k3..k5 per camera (24-vector ordering)."""
    x18 = np.asarray(x18, dtype=float)
    return np.concatenate([x18[0:6], np.zeros(3), x18[6:12], np.zeros(3), x18[12:18]])


@_stage("step4:bundle_adjustment")
def bundle_adjust_pair(y24, wand_poses, table: ObservationTable, wand: WandGeometry,
                       metas, cfg: PairConfig | None = None) -> PairCalibration:
    """Refine the 24 camera parameters and the wand poses by reprojection error."""
    cfg = cfg or PairConfig()
    cams = tuple(table.camera_ids)
    layout = bundle.RigLayout(cams, cams[0], cfg.pixel_pitch)
    y0 = np.asarray(y24, dtype=float)
    blocks = bundle.ReprojectionBlocks.from_table(table)
    rms0 = bundle.rms_by_camera(layout, y0, wand_poses, wand, blocks)
    y, poses, report = bundle.bundle_adjust(layout, y0, wand_poses, wand, blocks, cfg.bundle_lm,
                                            stage="step4:bundle_adjustment")
    theta_max = {c: metas[c].theta_max for c in cams}
    intr, rig_poses = layout.unpack(y, theta_max)
    rms = bundle.rms_by_camera(layout, y, poses, wand, blocks)
    return PairCalibration(
        cameras=cams,
        intrinsics=intr,
        pose=rig_poses[cams[1]],
        e_rms=rms,
        inlier_frames=table.frame_ids.copy(),
        rejected_frames=np.array([], dtype=int),
        wand_poses=poses,
        reports={"bundle": report, "e_rms_initial": rms0},
        deviations=["gauge_fix_mu"] if cfg.pixel_pitch == "vertical" else [],
    )


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def _metas_by_id(metas, cams):
    if isinstance(metas, dict):
        return {c: metas[c] for c in cams}
    by_id = {m.id: m for m in metas}
    return {c: by_id[c] for c in cams}


def calibrate_pair(table: ObservationTable, wand: WandGeometry, metas, cfg: PairConfig | None = None,
                   initial: dict | None = None) -> PairCalibration:
    """Full two-camera calibration from an observation table with exactly two cameras.

    ``metas`` is a dict or list of CameraMeta. ``initial`` may hold
    CameraIntrinsics keyed by camera id to replace the datasheet seeding.
    """
    cfg = cfg or PairConfig()
    if len(table.camera_ids) != 2:
        raise InsufficientDataError("pair calibration needs exactly two cameras", stage="input")
    c0, c1 = table.camera_ids
    metas = _metas_by_id(metas, (c0, c1))
    pair = table.pair(c0, c1)
    if len(pair) < cfg.min_frames:
        raise InsufficientDataError(
            f"{len(pair)} frames show the whole wand in both cameras, need {cfg.min_frames}",
            stage="input")
    theta_max = (metas[c0].theta_max, metas[c1].theta_max)

    initial = initial or {}
    intr0 = initial.get(c0) or _seed(metas[c0])
    intr1 = initial.get(c1) or _seed(metas[c1])

    info: dict = {}
    pose = init_extrinsics(intr0, intr1, pair, wand, cfg.ransac, info=info)
    x0 = state18(intr0, intr1, pose)
    x, step3 = optimize_distances(x0, pair, wand, cfg, theta_max)

    kept = reject_outliers(x, pair, wand, cfg.outlier_threshold, theta_max)
    rejected = np.setdiff1d(pair.frame_ids, kept.frame_ids)
    if rejected.size:
        log.info("cameras %d-%d: rejected %d of %d frames by wand length", c0, c1, rejected.size, len(pair))
    P = _reconstruct(x, kept.pixels[:, 0], kept.pixels[:, 1], theta_max, jacobian=False)
    poses0 = wand_poses_from_points(P[:, 0], P[:, 2])
    result = bundle_adjust_pair(state24(x), poses0, kept, wand, metas, cfg)
    result.rejected_frames = rejected
    result.reports.update(step2=info, step3=step3, initial_pose=pose, state18=x)
    return result


@_stage("step1:default_intrinsics")
def _seed(meta: CameraMeta) -> CameraIntrinsics:
    return default_intrinsics(meta)
