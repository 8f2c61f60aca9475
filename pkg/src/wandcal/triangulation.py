"""Linear n-view triangulation from unit bearings and wand scale recovery.

Each observation contributes two rows of the cross product m x (Q M) = 0,
with Q = [R | t] the camera's pose relative to the reference frame. The
homogeneous point M is the right singular vector of the stacked system with
the smallest singular value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .epipolar import Pose
from .errors import AtInfinityError, InvalidInputError

# below this |cos theta| the default rows lose rank and the best-conditioned pair is used
ROW_SWITCH_COS = 0.1
AT_INFINITY = 1e-12
ILL_CONDITIONED = 1e-6

# selection matrices: rows of [e_i]x for i = 0..2, used to build S(m) and dS/dm
_E_CROSS = np.array([
    [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
    [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
    [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
], dtype=float)


@dataclass
class ObservationRay:
    camera: int
    bearing: np.ndarray
    pose: Pose


@dataclass
class Triangulation:
    point: np.ndarray
    ill_conditioned: bool
    singular_ratio: float


def row_selection(m):
    """Indices of the two cross-product rows kept for each bearing, shape (..., 2)."""
    m = np.asarray(m, dtype=float)
    rows = np.broadcast_to(np.array([0, 1]), m.shape[:-1] + (2,)).copy()
    grazing = np.abs(m[..., 2]) < ROW_SWITCH_COS
    if np.any(grazing):
        # drop the row belonging to the largest bearing component (the shortest row)
        drop = np.argmax(np.abs(m[grazing]), axis=-1)
        keep = np.array([[1, 2], [0, 2], [0, 1]])[drop]
        rows[grazing] = keep
    return rows


def selection_matrices(m):
    """S(m): the two kept rows of [m]x, shape (..., 2, 3)."""
    m = np.asarray(m, dtype=float)
    cross = np.einsum("...i,ijk->...jk", m, _E_CROSS)
    rows = row_selection(m)
    return np.take_along_axis(cross, rows[..., None], axis=-2), rows


def design_matrix(bearings, rotations, translations, mask=None):
    """Stacked linear system A (N, 2V, 4) for V views of N points.

    bearings: (V, N, 3); rotations: (V, 3, 3); translations: (V, 3);
    mask: optional (V, N) booleans, rows of unobserved views are zeroed.
    """
    bearings = np.asarray(bearings, dtype=float)
    V, N = bearings.shape[:2]
    Q = np.concatenate([np.asarray(rotations, float), np.asarray(translations, float)[:, :, None]], axis=2)
    S, _ = selection_matrices(bearings)                      # (V, N, 2, 3)
    A = np.einsum("vnij,vjk->nvik", S, Q)                     # (N, V, 2, 4)
    if mask is not None:
        A = A * np.asarray(mask, dtype=float).T[:, :, None, None]
    return A.reshape(N, 2 * V, 4)


def _null_vectors(A):
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    return Vt[:, -1, :], s


def triangulate_points(bearings, rotations, translations, mask=None):
    """Vectorised triangulation; points with |w| < 1e-12 come back as NaN."""
    A = design_matrix(bearings, rotations, translations, mask)
    M, _ = _null_vectors(A)
    w = M[:, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        X = M[:, :3] / w[:, None]
    X[np.abs(w) < AT_INFINITY] = np.nan
    return X


def triangulate(rays: list[ObservationRay]) -> Triangulation:
    """Triangulate one point from >= 2 rays with distinct camera centres."""
    if len(rays) < 2:
        raise InvalidInputError("triangulation needs at least two rays")
    centres = np.array([-ray.pose.R.T @ ray.pose.t for ray in rays])
    spread = np.max(np.linalg.norm(centres - centres[0], axis=1))
    scale = max(1.0, np.max(np.linalg.norm(centres, axis=1)))
    if spread <= 1e-12 * scale:
        raise InvalidInputError("rays share one camera centre; depth is unobservable")
    bearings = np.array([np.asarray(ray.bearing, float) for ray in rays])[:, None, :]
    A = design_matrix(bearings,
                      np.array([ray.pose.R for ray in rays]),
                      np.array([ray.pose.t for ray in rays]))
    M, s = _null_vectors(A)
    M, s = M[0], s[0]
    if abs(M[3]) < AT_INFINITY:
        raise AtInfinityError("rays meet at infinity")
    ratio = float(s[-2] / s[0]) if s[0] > 0 else 0.0
    return Triangulation(M[:3] / M[3], ratio < ILL_CONDITIONED, ratio)


def triangulate_with_derivatives(A, dA):
    """Points from systems A (N, R, 4) and their derivatives along K directions.

    dA has shape (N, K, R, 4); returns X (N, 3) and dX (N, 3, K). The
    smallest eigenvector of A^T A is differentiated by first-order
    perturbation theory, then dehomogenised.
    """
    G = np.einsum("nri,nrj->nij", A, A)
    lam, V = np.linalg.eigh(G)
    M = V[:, :, 0]
    AM = np.einsum("nri,ni->nr", A, M)
    dAM = np.einsum("nkri,ni->nkr", dA, M)
    dGM = np.einsum("nkri,nr->nki", dA, AM) + np.einsum("nri,nkr->nki", A, dAM)
    dM = np.zeros_like(dGM)
    for j in range(1, 4):
        gap = lam[:, 0] - lam[:, j]
        coef = np.einsum("ni,nki->nk", V[:, :, j], dGM) / gap[:, None]
        dM += coef[:, :, None] * V[:, None, :, j]
    w = M[:, 3]
    X = M[:, :3] / w[:, None]
    dX = (dM[:, :, :3] - dM[:, :, 3:4] * X[:, None, :]) / w[:, None, None]
    return X, np.transpose(dX, (0, 2, 1))


def recover_scale(length: float, A_r, C_r) -> float:
    """Mean ratio of the true wand length to reconstructed |A - C| over frames."""
    A_r = np.atleast_2d(np.asarray(A_r, dtype=float))
    C_r = np.atleast_2d(np.asarray(C_r, dtype=float))
    if len(A_r) == 0:
        raise InvalidInputError("need at least one reconstructed frame")
    d = np.linalg.norm(A_r - C_r, axis=1)
    if not np.all(d > 0) or not np.all(np.isfinite(d)):
        raise InvalidInputError("reconstructed wand has zero or undefined length")
    return float(np.mean(length / d))
