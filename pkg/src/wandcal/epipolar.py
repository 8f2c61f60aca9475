"""Essential matrix estimation on unit bearings and its decomposition into a pose.

Poses map reference-camera coordinates into the other camera,
X1 = R X0 + t, so bearings satisfy m1^T [t]x R m0 = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AmbiguousDecompositionError,
    DegenerateConfigurationError,
    EstimationFailedError,
    InsufficientDataError,
)
from .rotation import log_rotation, rodrigues, skew


@dataclass
class Pose:
    """Rigid transform X_dst = R X_src + t with R = exp([r]x); t in mm."""

    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.r = np.array(self.r, dtype=float).reshape(3)
        self.t = np.array(self.t, dtype=float).reshape(3)

    @property
    def R(self) -> np.ndarray:
        return rodrigues(self.r)

    @classmethod
    def from_matrix(cls, R, t) -> "Pose":
        return cls(log_rotation(R), t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    def apply(self, X):
        return np.asarray(X, dtype=float) @ self.R.T + self.t

    def inverse(self) -> "Pose":
        R = self.R
        return Pose.from_matrix(R.T, -R.T @ self.t)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.t])

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:6])

    def __repr__(self):
        return f"Pose(r={np.array2string(self.r, precision=6)}, t={np.array2string(self.t, precision=4)})"


@dataclass
class CorrespondenceSet:
    """Matched unit bearings m0[i] <-> m1[i] with the frame and marker they came from."""

    m0: np.ndarray
    m1: np.ndarray
    frame_ids: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.m0 = np.asarray(self.m0, dtype=float).reshape(-1, 3)
        self.m1 = np.asarray(self.m1, dtype=float).reshape(-1, 3)
        self.frame_ids = np.asarray(self.frame_ids).reshape(-1)
        if self.labels is None:
            self.labels = np.zeros(len(self.m0), dtype=int)
        if not len(self.m0) == len(self.m1) == len(self.frame_ids):
            raise ValueError("correspondence arrays differ in length")

    def __len__(self):
        return len(self.m0)

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.m0[idx], self.m1[idx], self.frame_ids[idx], self.labels[idx])


@dataclass
class RansacConfig:
    threshold_deg: float = 0.5
    sample_size: int = 8
    min_inliers: int = 12
    min_sample_frames: int = 3
    confidence: float = 0.99
    max_iterations: int = 2000
    seed: int = 0
    refit_iterations: int = 10


def essential_from_pose(pose: Pose) -> np.ndarray:
    return skew(pose.t) @ pose.R


def epipolar_residual(E, m0, m1):
    """Angle (rad) between m1 and the epipolar plane of m0; pi/2 when E m0 = 0."""
    E = np.asarray(E, dtype=float)
    m0 = np.asarray(m0, dtype=float)
    m1 = np.asarray(m1, dtype=float)
    n = m0 @ E.T
    norm = np.linalg.norm(n, axis=-1)
    num = np.abs(np.sum(m1 * n, axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(norm > 0, num / np.where(norm > 0, norm, 1.0), 1.0)
    return np.arcsin(np.clip(ratio, 0.0, 1.0))


def _project_to_essential(F):
    U, s, Vt = np.linalg.svd(F)
    sigma = 0.5 * (s[0] + s[1])
    E = U @ np.diag([sigma, sigma, 0.0]) @ Vt
    return E / np.linalg.norm(E)


def _linear_solve(m0, m1):
    # rows are kron(m1, m0) so that row . vec(E) = m1^T E m0 with row-major vec
    A = (m1[:, :, None] * m0[:, None, :]).reshape(-1, 9)
    # a minimal sample has 8 rows; the null vector then only shows up in the full Vt
    _, s, Vt = np.linalg.svd(A, full_matrices=len(A) < 9)
    if len(s) < 8 or s[7] <= 1e-10 * s[0]:
        return None
    return _project_to_essential(Vt[-1].reshape(3, 3))


def estimate_essential_linear(corrs: CorrespondenceSet) -> np.ndarray:
    """Least-squares essential matrix from >= 8 correspondences over >= 3 frames."""
    if len(corrs) < 8:
        raise InsufficientDataError(f"need at least 8 correspondences, got {len(corrs)}")
    if len(np.unique(corrs.frame_ids)) < 3:
        raise DegenerateConfigurationError(
            "correspondences come from fewer than 3 frames; collinear markers cannot fix E")
    E = _linear_solve(corrs.m0, corrs.m1)
    if E is None:
        raise DegenerateConfigurationError("correspondence system is rank deficient")
    return E


def _draw_sample(rng, frame_ids, unique_frames, cfg):
    # one correspondence per frame where possible: triples from a single frame
    # are collinear in space and make the 8-point system badly conditioned
    n_frames = min(len(unique_frames), cfg.sample_size)
    chosen = rng.choice(unique_frames, size=n_frames, replace=False)
    first = [rng.choice(np.flatnonzero(frame_ids == f)) for f in chosen]
    if n_frames == cfg.sample_size:
        return np.asarray(first)
    pool = np.flatnonzero(np.isin(frame_ids, chosen))
    if len(pool) < cfg.sample_size:
        return None
    rest = np.setdiff1d(pool, first)
    extra = rng.choice(rest, size=cfg.sample_size - len(first), replace=False)
    return np.concatenate([first, extra])


def estimate_essential_ransac(corrs: CorrespondenceSet, cfg: RansacConfig | None = None):
    """RANSAC over linear 8-point hypotheses with an angular inlier threshold.

    Hypothesis i draws from its own generator seeded by (cfg.seed, i) and the
    winner is the lexicographic best of (inlier count, -i), so the result does
    not depend on evaluation order.

    Returns (E, inlier_mask).
    """
    cfg = cfg or RansacConfig()
    n = len(corrs)
    if n < cfg.sample_size:
        raise InsufficientDataError(f"need {cfg.sample_size} correspondences, got {n}")
    unique_frames = np.unique(corrs.frame_ids)
    if len(unique_frames) < cfg.min_sample_frames:
        raise DegenerateConfigurationError(
            f"correspondences span {len(unique_frames)} frames, need {cfg.min_sample_frames}")
    thr = np.deg2rad(cfg.threshold_deg)

    best_count, best_idx, best_mask, best_E = -1, -1, None, None
    n_required = cfg.max_iterations
    n_degenerate = 0
    i = 0
    while i < min(n_required, cfg.max_iterations):
        rng = np.random.default_rng([cfg.seed, i])
        sample = _draw_sample(rng, corrs.frame_ids, unique_frames, cfg)
        E = None if sample is None else _linear_solve(corrs.m0[sample], corrs.m1[sample])
        if E is None:
            n_degenerate += 1
        else:
            mask = epipolar_residual(E, corrs.m0, corrs.m1) < thr
            count = int(mask.sum())
            if count > best_count:
                best_count, best_idx, best_mask, best_E = count, i, mask, E
                w = count / n
                if w >= 1.0:
                    n_required = 0
                elif w > 0:
                    denom = math.log(1.0 - w ** cfg.sample_size)
                    if denom < 0:
                        n_required = math.ceil(math.log(1.0 - cfg.confidence) / denom)
        i += 1

    if best_mask is None:
        raise DegenerateConfigurationError(
            f"all {n_degenerate} RANSAC samples were degenerate")
    if best_count < cfg.min_inliers:
        raise EstimationFailedError(
            f"best model has {best_count} inliers, need {cfg.min_inliers}")

    # the winning sample is noisy, so its consensus set is biased toward it;
    # alternate refit and re-scoring while the consensus keeps growing
    E, mask = best_E, best_mask
    for _ in range(cfg.refit_iterations):
        try:
            E_new = estimate_essential_linear(corrs.subset(mask))
        except DegenerateConfigurationError:
            break
        new_mask = epipolar_residual(E_new, corrs.m0, corrs.m1) < thr
        if new_mask.sum() < mask.sum():
            break
        settled = np.array_equal(new_mask, mask)
        E, mask = E_new, new_mask
        if settled:
            break
    return E, mask


def _triangulate_pair(m0, m1, R, t):
    # two-view linear triangulation in the reference frame (no row switching needed for voting)
    from .triangulation import triangulate_points

    rot = np.stack([np.eye(3), R])
    trans = np.stack([np.zeros(3), t])
    return triangulate_points(np.stack([m0, m1]), rot, trans)


def cheirality_votes(m0, m1, R, t):
    """Number of correspondences reconstructed along both bearings."""
    X0 = _triangulate_pair(m0, m1, R, t)
    X1 = X0 @ R.T + t
    ok = (np.sum(m0 * X0, axis=1) > 0) & (np.sum(m1 * X1, axis=1) > 0)
    return int(np.count_nonzero(ok & np.all(np.isfinite(X0), axis=1)))


def essential_candidates(E):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    R1 = U @ W @ Vt
    R2 = U @ W.T @ Vt
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def decompose_essential(E, corrs: CorrespondenceSet) -> Pose:
    """Pick the (R, t) candidate with most bearing-aligned reconstructions; |t| = 1.

    Cheirality is tested as m . X > 0 in each camera rather than positive depth,
    which stays valid for incidence angles beyond 90 degrees.
    """
    if len(corrs) == 0:
        raise InsufficientDataError("need at least one correspondence to disambiguate E")
    votes = []
    cands = essential_candidates(np.asarray(E, dtype=float))
    for R, t in cands:
        votes.append(cheirality_votes(corrs.m0, corrs.m1, R, t))
    order = np.argsort(votes)[::-1]
    if votes[order[0]] == 0 or votes[order[0]] == votes[order[1]]:
        raise AmbiguousDecompositionError(f"cheirality votes {votes} do not single out a pose")
    R, t = cands[order[0]]
    return Pose.from_matrix(R, t / np.linalg.norm(t))
