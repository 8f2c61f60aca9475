"""Rodrigues rotation vectors: exponential map, logarithm and derivatives."""

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL_ANGLE = 1e-6


def skew(v):
    """Cross-product matrix: skew(v) @ x == np.cross(v, x)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _coefficients(theta):
    # sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series below the small-angle cutoff
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def rodrigues(r):
    """Rotation matrix exp([r]x). Accepts a 3-vector or a stack (..., 3)."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    a, b, _ = _coefficients(theta)
    K = skew(r)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def right_jacobian(r):
    """Right Jacobian of SO(3) at r (I - b[r]x + c[r]x^2)."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    _, b, c = _coefficients(theta)
    K = skew(r)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - b[..., None, None] * K + c[..., None, None] * (K @ K)


def rotate_jacobian(r, v):
    """d(exp([r]x) v)/dr for a single r and points v of shape (..., 3).

    Uses the closed form -R [v]x Jr(r); returns shape (..., 3, 3).
    """
    R = rodrigues(r)
    Jr = right_jacobian(r)
    return -R @ skew(v) @ Jr


def rotation_derivatives(r):
    """dR/dr_i for i = 0..2, stacked as an array of shape (3, 3, 3)."""
    # column j of dR/dr_i is d(R e_j)/dr_i
    cols = rotate_jacobian(r, np.eye(3))  # (j, 3, i)
    return np.transpose(cols, (2, 1, 0))


def log_rotation(R):
    """Rodrigues vector of a rotation matrix (angle in [0, pi])."""
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def euler_to_matrix(angles_deg, order="xyz"):
    """Rotation matrix from Euler angles in degrees (scipy conventions)."""
    return Rotation.from_euler(order, angles_deg, degrees=True).as_matrix()


def is_rotation(R, tol=1e-12):
    R = np.asarray(R, dtype=float)
    return (np.abs(R.T @ R - np.eye(3)).max() < tol
            and abs(np.linalg.det(R) - 1.0) < tol)
