"""Synthetic wand sequences for a known rig, plus the calibration error metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera_model import CameraIntrinsics, CameraMeta, default_intrinsics, project_points
from .epipolar import Pose
from .errors import InfeasibleScenarioError, InvalidInputError
from .rotation import euler_to_matrix
from .wand import ObservationTable, WandGeometry, wand_markers, wand_poses_from_points

MAX_REJECTION = 0.99
_BATCH = 256


@dataclass
class Rig:
    """Ground-truth cameras: datasheet metas plus true intrinsics and poses (camera <- reference)."""

    metas: dict
    intrinsics: dict
    poses: dict
    world: Pose = field(default_factory=Pose.identity)  # world -> reference camera

    @property
    def camera_ids(self):
        return sorted(self.metas)

    def subset(self, cams) -> "Rig":
        return Rig({c: self.metas[c] for c in cams}, {c: self.intrinsics[c] for c in cams},
                   {c: self.poses[c] for c in cams}, self.world)


@dataclass
class SimScenario:
    rig: Rig
    wand: WandGeometry
    volume: tuple = ((-350.0, -350.0, 700.0), (350.0, 350.0, 1000.0))  # world frame, mm
    frames: int = 300
    noise: float = 0.0
    seed: int = 0
    min_cameras: int | None = None   # None: every camera must see the whole wand

    def __post_init__(self):
        lo, hi = (np.asarray(v, dtype=float) for v in self.volume)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise InvalidInputError("motion volume must be a non-degenerate box")
        if self.frames < 1:
            raise InvalidInputError("frame count must be at least 1")
        if self.noise < 0:
            raise InvalidInputError("noise level must be non-negative")


@dataclass
class GroundTruth:
    rig: Rig
    wand: WandGeometry
    markers: np.ndarray      # (F, 3, 3) in the reference camera frame
    wand_poses: np.ndarray   # (F, 5)
    clean_pixels: np.ndarray  # (F, C, 3, 2) before noise, NaN where unseen


@dataclass
class MetricsReport:
    rotation_error: dict = field(default_factory=dict)
    translation_error: dict = field(default_factory=dict)
    e_rms: dict = field(default_factory=dict)
    d_rms: float | None = None
    intrinsic_errors: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "rotation_error_deg": {str(k): v for k, v in self.rotation_error.items()},
            "translation_error": {str(k): v for k, v in self.translation_error.items()},
            "e_rms_px": {str(k): v for k, v in self.e_rms.items()},
            "d_rms_mm": self.d_rms,
            "intrinsic_errors": {str(k): v for k, v in self.intrinsic_errors.items()},
        }


# ---------------------------------------------------------------------------
# rigs
# ---------------------------------------------------------------------------

REFERENCE_EULER = {1: (28.65, 28.65, 28.65), 2: (57.3, 57.3, 57.3)}
REFERENCE_T = {1: (-700.0, 100.0, 200.0), 2: (-1200.0, -200.0, 700.0)}


def reference_rig(n_cameras=3, focal=2.0, principal=(310.0, 250.0), nominal_focal=1.8,
              euler_order="xyz") -> Rig:
    """The three-camera simulation rig: 640x480 px, 5.6 um pixels, 185 deg equidistance lenses.

    ``focal`` and ``principal`` set the ground truth; ``nominal_focal`` is the
    datasheet value used for initialisation (the principal point starts at the
    image centre).
    """
    if not 2 <= n_cameras <= 3:
        raise InvalidInputError("the reference rig has two or three cameras")
    pitch = 0.0056
    metas, intr, poses = {}, {}, {}
    for c in range(n_cameras):
        metas[c] = CameraMeta(c, 640, 480, (pitch, pitch), nominal_focal, np.deg2rad(185.0), "equidistance")
        intr[c] = CameraIntrinsics([focal, 0, 0, 0, 0], 1 / pitch, 1 / pitch, *principal,
                                   theta_max=metas[c].theta_max)
        poses[c] = Pose.identity() if c == 0 else \
            Pose.from_matrix(euler_to_matrix(REFERENCE_EULER[c], euler_order), REFERENCE_T[c])
    return Rig(metas, intr, poses)


LENSES = {
    # width, height, pixel pitch (mm), nominal focal (mm), fov (deg), model hint
    "fisheye": (640, 480, 0.0056, 1.8, 185.0, "equidistance"),
    "conventional": (658, 492, 0.0074, 4.2, 86.77, "perspective"),
}


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World -> camera pose of a camera at ``position`` whose optical axis points at ``target``."""
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        raise InvalidInputError("viewing direction is parallel to the up vector")
    x /= np.linalg.norm(x)
    R = np.stack([x, np.cross(z, x), z])
    return Pose.from_matrix(R, -R @ position)


def room_rig(n_cameras=3, lens="fisheye", radius=3500.0, height=1000.0, focal=None,
             principal_offset=(8.0, -6.0)) -> Rig:
    """Cameras evenly spaced on a ring around the world origin, all looking at it.

    The world frame has z up and the origin at the centre of the working
    volume. The true focal defaults to the datasheet value; the true principal
    point is offset from the image centre by ``principal_offset`` pixels.
    """
    if lens not in LENSES:
        raise InvalidInputError(f"unknown lens {lens!r}")
    w, h, pitch, nominal, fov, hint = LENSES[lens]
    world_to_cam = {}
    metas, intr = {}, {}
    for c in range(n_cameras):
        a = 2 * np.pi * c / n_cameras
        world_to_cam[c] = look_at((radius * np.cos(a), radius * np.sin(a), height), (0.0, 0.0, 0.0))
        metas[c] = CameraMeta(c, w, h, (pitch, pitch), nominal, np.deg2rad(fov), hint)
        k = default_intrinsics(metas[c]).k
        if focal is not None:
            k = k * focal / nominal
        intr[c] = CameraIntrinsics(k, 1 / pitch, 1 / pitch, w / 2 + principal_offset[0],
                                   h / 2 + principal_offset[1], theta_max=metas[c].theta_max)
    ref = world_to_cam[0]
    poses = {c: chain(ref.inverse(), p) for c, p in world_to_cam.items()}
    poses[0] = Pose.identity()
    return Rig(metas, intr, poses, ref)


def chain(first: Pose, second: Pose) -> Pose:
    R = second.R
    return Pose.from_matrix(R @ first.R, R @ first.t + second.t)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def project_rig(rig: Rig, markers):
    """Pixels (F, C, 3, 2) of world markers (F, 3, 3); NaN outside the fov or image."""
    F = len(markers)
    cams = rig.camera_ids
    out = np.full((F, len(cams), 3, 2), np.nan)
    for ci, c in enumerate(cams):
        pose, meta, intr = rig.poses[c], rig.metas[c], rig.intrinsics[c]
        Y = markers.reshape(-1, 3) @ pose.R.T + pose.t
        theta = np.arctan2(np.hypot(Y[:, 0], Y[:, 1]), Y[:, 2])
        uv = project_points(intr.to_vector(), Y)
        ok = (theta <= meta.theta_max) & (uv[:, 0] >= 0) & (uv[:, 0] <= meta.width - 1) \
            & (uv[:, 1] >= 0) & (uv[:, 1] <= meta.height - 1)
        uv[~ok] = np.nan
        out[:, ci] = uv.reshape(F, 3, 2)
    return out


def _to_reference(rig: Rig, world_poses, wand):
    X = wand_markers(world_poses, wand)
    return X @ rig.world.R.T + rig.world.t


def generate(scenario: SimScenario):
    """Sample wand frames, project them and add Gaussian pixel noise.

    Returns (ObservationTable, GroundTruth). Deterministic for a given seed.
    """
    rng = np.random.default_rng(scenario.seed)
    lo, hi = (np.asarray(v, dtype=float) for v in scenario.volume)
    rig = scenario.rig
    need = len(rig.camera_ids) if scenario.min_cameras is None else scenario.min_cameras
    poses, pixels = [], []
    accepted = attempts = 0
    while accepted < scenario.frames:
        A = rng.uniform(lo, hi, size=(_BATCH, 3))
        d = rng.normal(size=(_BATCH, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        phi = np.arccos(np.clip(d[:, 2], -1, 1))
        theta = np.arctan2(d[:, 1], d[:, 0])
        batch = np.column_stack([A, phi, theta])
        pix = project_rig(rig, _to_reference(rig, batch, scenario.wand))
        full = np.all(np.isfinite(pix), axis=(2, 3))
        ok = np.count_nonzero(full, axis=1) >= need
        take = np.flatnonzero(ok)[: scenario.frames - accepted]
        attempts += _BATCH if len(take) == np.count_nonzero(ok) else int(np.flatnonzero(ok)[len(take)])
        poses.append(batch[take])
        pixels.append(pix[take])
        accepted += len(take)
        if attempts >= 10 * _BATCH and accepted < (1 - MAX_REJECTION) * attempts:
            raise InfeasibleScenarioError(
                f"only {accepted} of {attempts} sampled frames are visible; "
                "check the motion volume against the camera fields of view")
    markers = _to_reference(rig, np.concatenate(poses), scenario.wand)
    wand_poses = wand_poses_from_points(markers[:, 0], markers[:, 2])
    clean = np.concatenate(pixels)
    noisy = clean + rng.normal(0.0, scenario.noise, size=clean.shape) if scenario.noise > 0 else clean.copy()
    table = ObservationTable(np.arange(scenario.frames), rig.camera_ids, noisy)
    truth = GroundTruth(rig, scenario.wand, markers, wand_poses, clean)
    return table, truth


def placements(rig: Rig, wand: WandGeometry, count=20, volume=None, seed=0, min_cameras=2):
    """Random wand placements (default 3 m cube in front of the rig) for a measurement test."""
    if volume is None:
        volume = ((-1500.0, -1500.0, 500.0), (1500.0, 1500.0, 3500.0))
    return generate(SimScenario(rig, wand, volume, count, 0.0, seed, min_cameras))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def rotation_error(R_true, R_est) -> float:
    """Largest angle in degrees between corresponding columns."""
    a, b = np.asarray(R_true, dtype=float), np.asarray(R_est, dtype=float)
    # atan2 form of the column angle: exact at zero where acos loses half the digits
    sin = np.linalg.norm(np.cross(a, b, axis=0), axis=0)
    cos = np.sum(a * b, axis=0)
    return float(np.rad2deg(np.max(np.arctan2(sin, cos))))


def translation_error(T_true, T_est) -> float:
    T_true = np.asarray(T_true, dtype=float)
    norm = np.linalg.norm(T_true)
    if norm == 0:
        raise InvalidInputError("relative translation error is undefined for a zero translation")
    return float(np.linalg.norm(T_true - np.asarray(T_est, dtype=float)) / norm)


def rms_reprojection(intr: CameraIntrinsics, pose: Pose, points_3d, pixels) -> float:
    """Root mean square Euclidean pixel distance between observations and reprojections."""
    Y = pose.apply(np.asarray(points_3d, dtype=float).reshape(-1, 3))
    uv = project_points(intr.to_vector(), Y)
    diff = uv - np.asarray(pixels, dtype=float).reshape(-1, 2)
    return float(np.sqrt(np.mean(np.sum(diff**2, axis=1))))


def d_rms(wand: WandGeometry, A_r, C_r) -> float:
    lengths = np.linalg.norm(np.asarray(A_r, float) - np.asarray(C_r, float), axis=-1)
    return float(np.sqrt(np.mean((wand.L - lengths) ** 2)))


def compare(rig: Rig, intrinsics: dict, poses: dict, e_rms: dict | None = None,
            d_rms_mm: float | None = None) -> MetricsReport:
    """Error metrics of an estimate against ground truth, for every non-reference camera."""
    report = MetricsReport(e_rms=dict(e_rms or {}), d_rms=d_rms_mm)
    for c, true_pose in rig.poses.items():
        if c not in poses:
            continue
        if np.linalg.norm(true_pose.t) > 0:
            report.rotation_error[c] = rotation_error(true_pose.R, poses[c].R)
            report.translation_error[c] = translation_error(true_pose.t, poses[c].t)
        ti, ei = rig.intrinsics[c], intrinsics[c]
        report.intrinsic_errors[c] = {
            "k1": float(abs(ei.k[0] - ti.k[0])),
            "u0": float(abs(ei.u0 - ti.u0)),
            "v0": float(abs(ei.v0 - ti.v0)),
        }
    return report


# ---------------------------------------------------------------------------
# parameter sweeps
# ---------------------------------------------------------------------------

REFERENCE_WAND = WandGeometry(400.0, 200.0, 600.0)
SWEEPS = {
    "noise": np.linspace(0.0, 2.0, 10),
    "focal": np.linspace(1.5, 2.5, 11),
    "principal": np.linspace(270.0, 370.0, 11),
}
_SWEEP_ID = {name: i for i, name in enumerate(SWEEPS)}


def sweep_scenario(kind: str, value: float, n_cameras: int, seed: int, frames: int = 300) -> SimScenario:
    """Scenario for one cell of a sweep on the reference rig.

    noise: sigma varies, truth 2 mm / (310, 250), datasheet 1.8 mm.
    focal: truth focal varies with the datasheet fixed at 2 mm, sigma = 1.
    principal: truth (p, p - 80) along the image diagonal, sigma = 1.
    """
    if kind == "noise":
        rig, noise = reference_rig(n_cameras), float(value)
    elif kind == "focal":
        rig, noise = reference_rig(n_cameras, focal=float(value), nominal_focal=2.0), 1.0
    elif kind == "principal":
        rig, noise = reference_rig(n_cameras, principal=(float(value), float(value) - 80.0)), 1.0
    else:
        raise InvalidInputError(f"unknown sweep {kind!r}")
    return SimScenario(rig, REFERENCE_WAND, frames=frames, noise=noise, seed=seed,
                       min_cameras=None if n_cameras == 2 else 2)


def cell_seed(base: int, kind: str, index: int, n_cameras: int, repeat: int) -> int:
    """Independent, reproducible seed for one sweep run."""
    seq = np.random.SeedSequence([base, _SWEEP_ID[kind], index, n_cameras, repeat])
    return int(seq.generate_state(1)[0])


def run_trial(scenario: SimScenario, cfg=None) -> list[dict]:
    """Generate, calibrate and score one scenario; one row per camera."""
    from .multi_calib import calibrate

    table, truth = generate(scenario)
    result = calibrate(table, scenario.wand, scenario.rig.metas, cfg)
    report = compare(scenario.rig, result.intrinsics, result.poses, result.e_rms, result.d_rms)
    rows = []
    for c in scenario.rig.camera_ids:
        est, true = result.intrinsics[c], scenario.rig.intrinsics[c]
        rows.append({
            "camera": c,
            "focal": float(est.k[0]),
            "u0": est.u0,
            "v0": est.v0,
            "focal_error": float(est.k[0] - true.k[0]),
            "u0_error": est.u0 - true.u0,
            "v0_error": est.v0 - true.v0,
            "E_r": report.rotation_error.get(c, np.nan),
            "E_t": report.translation_error.get(c, np.nan),
            "E_RMS": report.e_rms.get(c, np.nan),
            "D_RMS": result.d_rms,
            "frames_used": len(result.frames_used),
        })
    return rows


def _sweep_job(args):
    kind, index, value, n_cameras, repeat, seed, frames = args
    base = {"sweep": kind, "value": float(value), "cameras": n_cameras, "repeat": repeat, "seed": seed}
    try:
        rows = run_trial(sweep_scenario(kind, value, n_cameras, seed, frames))
    except Exception as exc:  # a failed run is recorded, not fatal for the sweep
        return [{**base, "camera": -1, "error": f"{type(exc).__name__}: {exc}"}]
    return [{**base, **row, "error": ""} for row in rows]


def run_sweep(kind: str, repeats: int = 10, cameras=(2, 3), seed: int = 0, frames: int = 300,
              values=None, jobs: int = 1) -> list[dict]:
    """Run every (value, rig size, repeat) cell of a sweep; returns raw per-camera rows."""
    values = SWEEPS[kind] if values is None else np.asarray(values, dtype=float)
    tasks = [(kind, i, v, n, r, cell_seed(seed, kind, i, n, r), frames)
             for i, v in enumerate(values) for n in cameras for r in range(repeats)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_sweep_job, tasks))
    else:
        results = [_sweep_job(t) for t in tasks]
    return [row for rows in results for row in rows]


def aggregate_sweep(rows: list[dict]) -> list[dict]:
    """Mean of each metric per (sweep value, rig size, camera) over successful repeats."""
    metrics = ("focal", "u0", "v0", "focal_error", "u0_error", "v0_error", "E_r", "E_t", "E_RMS", "D_RMS")
    groups: dict = {}
    failures: dict = {}
    for row in rows:
        cell = (row["sweep"], row["value"], row["cameras"])
        if row["error"]:
            failures[cell] = failures.get(cell, 0) + 1
            continue
        groups.setdefault(cell + (row["camera"],), []).append(row)
    out = []
    for (kind, value, n, cam), members in sorted(groups.items()):
        agg = {"sweep": kind, "value": value, "cameras": n, "camera": cam, "runs": len(members),
               "failures": failures.get((kind, value, n), 0)}
        for m in metrics:
            vals = np.array([r[m] for r in members], dtype=float)
            agg[m] = float(np.mean(vals)) if np.any(np.isfinite(vals)) else float("nan")
        out.append(agg)
    for (kind, value, n), count in sorted(failures.items()):
        if not any(key[:3] == (kind, value, n) for key in groups):
            out.append({"sweep": kind, "value": value, "cameras": n, "camera": -1, "runs": 0,
                        "failures": count, **{m: float("nan") for m in metrics}})
    return out
