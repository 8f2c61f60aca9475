"""Wand geometry, minimal wand poses and the per-frame observation table."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

log = logging.getLogger(__name__)

MARKERS = ("a", "b", "c")


@dataclass(frozen=True)
class WandGeometry:
    """Marker spacings in mm: |A-B| = L1, |B-C| = L2, |A-C| = L."""

    L1: float
    L2: float
    L: float

    def __post_init__(self):
        if min(self.L1, self.L2, self.L) <= 0:
            raise InvalidInputError("wand lengths must be positive")
        if abs(self.L1 + self.L2 - self.L) > 1e-6 * self.L:
            raise InvalidInputError(
                f"wand lengths inconsistent: L1 + L2 = {self.L1 + self.L2} but L = {self.L}")

    @property
    def offsets(self) -> np.ndarray:
        """Distances of A, B, C from A along the wand."""
        return np.array([0.0, self.L1, self.L])


@dataclass
class WandPose:
    """Marker A position (mm) plus the polar angle phi and azimuth theta of the wand."""

    A: np.ndarray
    phi: float
    theta: float

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float).reshape(3)

    @property
    def direction(self) -> np.ndarray:
        return direction_from_angles(self.phi, self.theta)

    def markers(self, wand: WandGeometry) -> np.ndarray:
        """Positions of A, B, C as a (3, 3) array."""
        return self.A + wand.offsets[:, None] * self.direction

    def to_vector(self) -> np.ndarray:
        return np.array([*self.A, self.phi, self.theta])


def direction_from_angles(phi, theta):
    sp = np.sin(phi)
    return np.stack([sp * np.cos(theta), sp * np.sin(theta), np.cos(phi)], axis=-1)


def wand_pose_from_points(A_r, B_r, C_r) -> WandPose:
    """Minimal pose from reconstructed markers; B_r is not needed."""
    poses = wand_poses_from_points(np.atleast_2d(A_r), np.atleast_2d(C_r))
    return WandPose(poses[0, :3], poses[0, 3], poses[0, 4])


def wand_poses_from_points(A_r, C_r) -> np.ndarray:
    """Vectorised version returning (N, 5) rows of (A, phi, theta)."""
    A_r = np.asarray(A_r, dtype=float)
    d = np.asarray(C_r, dtype=float) - A_r
    length = np.linalg.norm(d, axis=-1)
    if np.any(~(length > 0)):
        raise InvalidInputError("wand endpoints coincide")
    n = d / length[..., None]
    phi = np.arccos(np.clip(n[..., 2], -1.0, 1.0))
    at_pole = np.hypot(n[..., 0], n[..., 1]) == 0
    theta = np.where(at_pole, 0.0, np.arctan2(n[..., 1], n[..., 0]))
    return np.concatenate([A_r, phi[..., None], theta[..., None]], axis=-1)


def wand_markers(poses, wand: WandGeometry, jacobian=False):
    """Marker positions (F, 3, 3) from pose rows (F, 5); optionally d/dpose (F, 3, 3, 5)."""
    poses = np.asarray(poses, dtype=float)
    A = poses[:, :3]
    phi, theta = poses[:, 3], poses[:, 4]
    n = direction_from_angles(phi, theta)
    off = wand.offsets
    X = A[:, None, :] + off[None, :, None] * n[:, None, :]
    if not jacobian:
        return X
    sp, cp, st, ct = np.sin(phi), np.cos(phi), np.sin(theta), np.cos(theta)
    dn_dphi = np.stack([cp * ct, cp * st, -sp], axis=-1)
    dn_dtheta = np.stack([-sp * st, sp * ct, np.zeros_like(sp)], axis=-1)
    J = np.zeros(X.shape + (5,))
    J[..., 0:3] = np.eye(3)
    J[..., 3] = off[None, :, None] * dn_dphi[:, None, :]
    J[..., 4] = off[None, :, None] * dn_dtheta[:, None, :]
    return X, J


@dataclass
class WandObservation:
    """Pixels of markers A, B, C seen by one camera in one frame (None when unseen)."""

    frame: int
    camera: int
    a: np.ndarray | None
    b: np.ndarray | None
    c: np.ndarray | None

    def pixels(self) -> np.ndarray:
        out = np.full((3, 2), np.nan)
        for i, p in enumerate((self.a, self.b, self.c)):
            if p is not None:
                out[i] = p
        return out


class ObservationTable:
    """Dense (frame, camera, marker, uv) pixel array with NaN for missing markers."""

    def __init__(self, frame_ids, camera_ids, pixels):
        self.frame_ids = np.asarray(frame_ids, dtype=int)
        self.camera_ids = [int(c) for c in camera_ids]
        self.pixels = np.asarray(pixels, dtype=float)
        expected = (len(self.frame_ids), len(self.camera_ids), 3, 2)
        if self.pixels.shape != expected:
            raise ValueError(f"pixel array has shape {self.pixels.shape}, expected {expected}")

    @classmethod
    def from_observations(cls, observations, camera_ids=None) -> "ObservationTable":
        observations = list(observations)
        if camera_ids is None:
            camera_ids = sorted({o.camera for o in observations})
        frames = sorted({o.frame for o in observations})
        fidx = {f: i for i, f in enumerate(frames)}
        cidx = {c: i for i, c in enumerate(camera_ids)}
        pix = np.full((len(frames), len(camera_ids), 3, 2), np.nan)
        for o in observations:
            if o.camera in cidx:
                pix[fidx[o.frame], cidx[o.camera]] = o.pixels()
        return cls(frames, camera_ids, pix)

    def to_observations(self) -> list[WandObservation]:
        out = []
        for fi, f in enumerate(self.frame_ids):
            for ci, c in enumerate(self.camera_ids):
                p = self.pixels[fi, ci]
                seen = np.all(np.isfinite(p), axis=1)
                if seen.any():
                    out.append(WandObservation(int(f), c, *(p[i] if seen[i] else None for i in range(3))))
        return out

    def __len__(self):
        return len(self.frame_ids)

    @property
    def visible(self) -> np.ndarray:
        """(F, C, 3) booleans: marker seen by camera in frame."""
        return np.all(np.isfinite(self.pixels), axis=-1)

    @property
    def full_view(self) -> np.ndarray:
        """(F, C) booleans: camera sees all three markers."""
        return np.all(self.visible, axis=-1)

    def camera_index(self, cam: int) -> int:
        return self.camera_ids.index(cam)

    def select_frames(self, mask) -> "ObservationTable":
        return ObservationTable(self.frame_ids[mask], self.camera_ids, self.pixels[mask])

    def select_cameras(self, cams) -> "ObservationTable":
        idx = [self.camera_index(c) for c in cams]
        return ObservationTable(self.frame_ids, list(cams), self.pixels[:, idx])

    def pair(self, cam_i: int, cam_j: int) -> "ObservationTable":
        """Frames where both cameras see the whole wand, restricted to those two cameras."""
        sub = self.select_cameras([cam_i, cam_j])
        return sub.select_frames(np.all(sub.full_view, axis=1))

    def check_bounds(self, metas) -> int:
        """Count (and log) pixels outside their image; they are kept."""
        bad = 0
        for ci, cam in enumerate(self.camera_ids):
            meta = metas[cam]
            p = self.pixels[:, ci]
            out = (p[..., 0] < 0) | (p[..., 0] >= meta.width) | (p[..., 1] < 0) | (p[..., 1] >= meta.height)
            bad += int(np.count_nonzero(out & np.isfinite(p[..., 0])))
        if bad:
            log.warning("%d marker pixels lie outside their image bounds", bad)
        return bad
