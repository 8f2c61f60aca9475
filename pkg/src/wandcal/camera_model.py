"""Generic radial camera model r(theta) = k1 t + k2 t^3 + k3 t^5 + k4 t^7 + k5 t^9.

Image coordinates (mm) are r(theta) (cos phi, sin phi); pixels follow from the
per-axis pixel densities mu, mv (px/mm) and the principal point (u0, v0).
Tangential distortion is not modelled.

Intrinsic parameter vectors use the ordering (k1, k2, mu, mv, u0, v0, k3, k4, k5)
throughout the package; the vectorised helpers taking ``params`` expect it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError, OutOfFovError, OutOfRangeError

PARAM_NAMES = ("k1", "k2", "mu", "mv", "u0", "v0", "k3", "k4", "k5")
K_INDEX = np.array([0, 1, 6, 7, 8])
FOV_MARGIN = np.deg2rad(5.0)
MONOTONE_GRID = 1024


class ProjectionType(enum.IntEnum):
    PERSPECTIVE = 1
    EQUIDISTANCE = 2
    ORTHOGONAL = 3
    STEREOGRAPHIC = 4
    EQUISOLID = 5


def projection_curve(kind: ProjectionType, f, theta):
    """Design projection r(f, theta) of a lens type, in mm."""
    theta = np.asarray(theta, dtype=float)
    if kind == ProjectionType.PERSPECTIVE:
        return f * np.tan(theta)
    if kind == ProjectionType.EQUIDISTANCE:
        return f * theta
    if kind == ProjectionType.ORTHOGONAL:
        return f * np.sin(theta)
    if kind == ProjectionType.STEREOGRAPHIC:
        return 2.0 * f * np.tan(theta / 2.0)
    if kind == ProjectionType.EQUISOLID:
        return 2.0 * f * np.sin(theta / 2.0)
    raise ValueError(f"unknown projection type {kind!r}")


_HINTS = {
    "perspective": ProjectionType.PERSPECTIVE,
    "equidistance": ProjectionType.EQUIDISTANCE,
    "orthogonal": ProjectionType.ORTHOGONAL,
    "stereographic": ProjectionType.STEREOGRAPHIC,
    "equisolid": ProjectionType.EQUISOLID,
    "auto": None,
}


@dataclass(frozen=True)
class CameraMeta:
    """Datasheet description of a camera; angles in radians, lengths in mm."""

    id: int
    width: int
    height: int
    pixel_size: tuple[float, float]
    nominal_focal: float
    fov: float
    model_hint: str = "auto"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError(f"camera {self.id}: image size must be positive")
        if not 0.0 < self.fov < 2.0 * np.pi:
            raise InvalidInputError(f"camera {self.id}: fov must lie in (0, 2pi)")
        if min(self.pixel_size) <= 0:
            raise InvalidInputError(f"camera {self.id}: pixel size must be positive")
        if self.model_hint not in _HINTS:
            raise InvalidInputError(f"camera {self.id}: unknown model hint {self.model_hint!r}")

    @property
    def theta_max(self) -> float:
        return 0.5 * self.fov


@dataclass(eq=False)
class CameraIntrinsics:
    k: np.ndarray
    mu: float
    mv: float
    u0: float
    v0: float
    theta_max: float = 0.5 * np.pi

    def __post_init__(self):
        self.k = np.array(self.k, dtype=float).reshape(5)
        self.mu, self.mv = float(self.mu), float(self.mv)
        self.u0, self.v0 = float(self.u0), float(self.v0)
        self.theta_max = float(self.theta_max)

    def to_vector(self) -> np.ndarray:
        k = self.k
        return np.array([k[0], k[1], self.mu, self.mv, self.u0, self.v0, k[2], k[3], k[4]])

    @classmethod
    def from_vector(cls, params, theta_max=0.5 * np.pi) -> "CameraIntrinsics":
        p = np.asarray(params, dtype=float)
        return cls(k=p[K_INDEX], mu=p[2], mv=p[3], u0=p[4], v0=p[5], theta_max=theta_max)

    def copy(self) -> "CameraIntrinsics":
        return CameraIntrinsics.from_vector(self.to_vector(), self.theta_max)

    def radial(self, theta):
        return radial(self.k, theta)

    def is_monotone(self, n: int = MONOTONE_GRID) -> bool:
        theta = np.linspace(0.0, self.theta_max, n)
        return bool(np.all(radial_derivative(self.k, theta) > 0))

    def validate(self):
        """Raise InvalidInputError when an invariant of the model is violated."""
        if not self.k[0] > 0:
            raise InvalidInputError("k1 must be positive")
        if not (self.mu > 0 and self.mv > 0):
            raise InvalidInputError("pixel densities mu, mv must be positive")
        if not self.is_monotone():
            raise InvalidInputError("r(theta) is not increasing on [0, theta_max]")

    def __repr__(self):
        k = ", ".join(f"{v:.6g}" for v in self.k)
        return (f"CameraIntrinsics(k=[{k}], mu={self.mu:.6g}, mv={self.mv:.6g}, "
                f"u0={self.u0:.6g}, v0={self.v0:.6g})")


def radial(k, theta):
    t2 = theta * theta
    return theta * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * (k[3] + t2 * k[4]))))


def radial_derivative(k, theta):
    t2 = theta * theta
    return k[0] + t2 * (3 * k[1] + t2 * (5 * k[2] + t2 * (7 * k[3] + t2 * 9 * k[4])))


def _odd_powers(theta):
    # d r / d(k1..k5) = theta^(1,3,5,7,9), stacked on the last axis
    t2 = theta * theta
    p1 = theta
    p3 = p1 * t2
    p5 = p3 * t2
    p7 = p5 * t2
    return np.stack([p1, p3, p5, p7, p7 * t2], axis=-1)


def bearing_from_angles(theta, phi):
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def bearing_angles(m):
    """(theta, phi) of unit bearings; phi wrapped into [0, 2pi)."""
    m = np.asarray(m, dtype=float)
    theta = np.arccos(np.clip(m[..., 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(m[..., 1], m[..., 0]), 2.0 * np.pi)
    return theta, phi


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project_points(params, X):
    """Vectorised projection of camera-frame points (N, 3) to pixels (N, 2).

    No field-of-view checks; points on the negative optical axis give NaN.
    """
    return _project(params, X, jacobians=False)[0]


def project_with_jacobians(params, X):
    """Pixels together with d(uv)/dX (N, 2, 3) and d(uv)/dparams (N, 2, 9)."""
    return _project(params, X, jacobians=True)


def _project(params, X, jacobians):
    p = np.asarray(params, dtype=float)
    k = p[K_INDEX]
    mu, mv, u0, v0 = p[2], p[3], p[4], p[5]
    X = np.asarray(X, dtype=float)
    x, y, z = X[..., 0], X[..., 1], X[..., 2]
    rho = np.hypot(x, y)
    n2 = rho * rho + z * z
    theta = np.arctan2(rho, z)
    on_axis = rho <= 1e-300
    safe_rho = np.where(on_axis, 1.0, rho)
    c = np.where(on_axis, 1.0, x / safe_rho)
    s = np.where(on_axis, 0.0, y / safe_rho)
    r = radial(k, theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(on_axis, np.where(z > 0, k[0] / np.where(z > 0, z, 1.0), np.nan), r / safe_rho)
    uv = np.stack([mu * q * x + u0, mv * q * y + v0], axis=-1)
    if not jacobians:
        return uv, None, None

    rp = radial_derivative(k, theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        dtheta = np.stack([z * c, z * s, -rho], axis=-1) / n2[..., None]
    zero = np.zeros_like(x)
    dc = np.stack([s * s, -c * s, zero], axis=-1)
    ds = np.stack([-c * s, c * c, zero], axis=-1)
    dX = np.empty(X.shape[:-1] + (2, 3))
    dX[..., 0, :] = mu * (rp * c)[..., None] * dtheta + (mu * q)[..., None] * dc
    dX[..., 1, :] = mv * (rp * s)[..., None] * dtheta + (mv * q)[..., None] * ds

    powers = _odd_powers(theta)
    dp = np.zeros(X.shape[:-1] + (2, 9))
    dp[..., 0, K_INDEX] = mu * c[..., None] * powers
    dp[..., 1, K_INDEX] = mv * s[..., None] * powers
    dp[..., 0, 2] = r * c
    dp[..., 1, 3] = r * s
    dp[..., 0, 4] = 1.0
    dp[..., 1, 5] = 1.0
    return uv, dX, dp


def project(intr: CameraIntrinsics, point, margin: float = FOV_MARGIN):
    """Project camera-frame point(s) in mm to pixel coordinates.

    Raises InvalidInputError for a point at the camera centre and
    OutOfFovError when the incidence angle exceeds theta_max + margin.
    """
    X = np.asarray(point, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(X)):
        raise InvalidInputError("cannot project a point at the camera centre")
    theta = np.arctan2(np.hypot(X[:, 0], X[:, 1]), X[:, 2])
    if np.any(theta > intr.theta_max + margin):
        worst = np.rad2deg(theta.max())
        raise OutOfFovError(f"incidence angle {worst:.3f} deg exceeds the field of view")
    uv = project_points(intr.to_vector(), X)
    return uv[0] if single else uv


# ---------------------------------------------------------------------------
# unprojection
# ---------------------------------------------------------------------------

def invertible_limit(k, theta_hi, n: int = MONOTONE_GRID) -> float:
    """Largest angle <= theta_hi up to which r(theta) keeps increasing."""
    grid = np.linspace(0.0, theta_hi, n)
    bad = np.nonzero(radial_derivative(k, grid) <= 0)[0]
    if bad.size == 0:
        return float(theta_hi)
    return float(grid[max(bad[0] - 1, 0)])


def solve_theta(k, rho, theta_hi, tol=1e-12, max_iter=50):
    """Invert r(theta) = rho on [0, theta_hi] by safeguarded Newton iteration.

    Entries with rho outside [0, r(theta_hi)] come back as NaN.
    """
    k = np.asarray(k, dtype=float)
    rho = np.asarray(rho, dtype=float)
    rho_hi = radial(k, theta_hi)
    valid = np.isfinite(rho) & (rho >= 0) & (rho <= rho_hi * (1 + 1e-12))
    target = np.where(valid, np.minimum(rho, rho_hi), 0.0)
    lo = np.zeros_like(target)
    hi = np.full_like(target, theta_hi)
    if k[0] > 0:
        theta = np.clip(target / k[0], 0.0, theta_hi)
    else:
        theta = np.full_like(target, 0.5 * theta_hi)
    for _ in range(max_iter):
        f = radial(k, theta) - target
        lo = np.where(f < 0, theta, lo)
        hi = np.where(f > 0, theta, hi)
        fp = radial_derivative(k, theta)
        with np.errstate(divide="ignore", invalid="ignore"):
            new = theta - f / fp
        outside = ~((new >= lo) & (new <= hi))
        new = np.where(outside, 0.5 * (lo + hi), new)
        step = np.abs(new - theta)
        theta = new
        if np.all(step < tol):
            break
    return np.where(valid, theta, np.nan)


def unproject_points(params, pixels, theta_max=0.5 * np.pi, margin=FOV_MARGIN):
    """Vectorised pixels (N, 2) to unit bearings (N, 3); NaN where out of range."""
    return _unproject(params, pixels, theta_max + margin, jacobians=False)[0]


def unproject_with_jacobian(params, pixels, theta_max=0.5 * np.pi, margin=FOV_MARGIN):
    """Bearings and d(bearing)/dparams of shape (N, 3, 9)."""
    return _unproject(params, pixels, theta_max + margin, jacobians=True)


def _unproject(params, pixels, theta_hi, jacobians):
    p = np.asarray(params, dtype=float)
    k = p[K_INDEX]
    mu, mv, u0, v0 = p[2], p[3], p[4], p[5]
    pix = np.asarray(pixels, dtype=float)
    xd = (pix[..., 0] - u0) / mu
    yd = (pix[..., 1] - v0) / mv
    rho = np.hypot(xd, yd)
    limit = invertible_limit(k, theta_hi)
    theta = solve_theta(k, rho, limit)
    tiny = rho < 1e-12
    safe_rho = np.where(tiny, 1.0, rho)
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    scale = np.where(tiny, 1.0 / k[0], sin_t / safe_rho)
    m = np.stack([scale * xd, scale * yd, cos_t], axis=-1)
    if not jacobians:
        return m, None

    shape = rho.shape
    dxd = np.zeros(shape + (9,))
    dyd = np.zeros(shape + (9,))
    dxd[..., 2] = -xd / mu
    dxd[..., 4] = -1.0 / mu
    dyd[..., 3] = -yd / mv
    dyd[..., 5] = -1.0 / mv
    drho = (xd[..., None] * dxd + yd[..., None] * dyd) / safe_rho[..., None]
    dr_dk = np.zeros(shape + (9,))
    dr_dk[..., K_INDEX] = _odd_powers(theta)
    rp = radial_derivative(k, theta)
    dtheta = (drho - dr_dk) / rp[..., None]
    dscale = (cos_t / safe_rho)[..., None] * dtheta - (sin_t / safe_rho**2)[..., None] * drho
    dscale_tiny = np.zeros(9)
    dscale_tiny[0] = -1.0 / k[0] ** 2
    dscale = np.where(tiny[..., None], dscale_tiny, dscale)
    dm = np.empty(shape + (3, 9))
    dm[..., 0, :] = dscale * xd[..., None] + scale[..., None] * dxd
    dm[..., 1, :] = dscale * yd[..., None] + scale[..., None] * dyd
    dm[..., 2, :] = -sin_t[..., None] * dtheta
    return m, dm


def unproject(intr: CameraIntrinsics, pixel, margin: float = FOV_MARGIN):
    """Unit bearing(s) for pixel(s); OutOfRangeError when the radius cannot be inverted."""
    pix = np.asarray(pixel, dtype=float)
    single = pix.ndim == 1
    m = unproject_points(intr.to_vector(), np.atleast_2d(pix), intr.theta_max, margin)
    if np.any(~np.isfinite(m)):
        raise OutOfRangeError("pixel radius outside the monotone range of r(theta)")
    return m[0] if single else m


# ---------------------------------------------------------------------------
# initialisation from the datasheet
# ---------------------------------------------------------------------------

class InitialFit(NamedTuple):
    k1: float
    k2: float
    projection: ProjectionType
    residual: float


def fit_initial_k(meta: CameraMeta, samples: int = 100) -> InitialFit:
    """Least-squares fit of k1 t + k2 t^3 to the design projection curves.

    Every curve allowed by ``meta.model_hint`` is fitted over ``samples``
    equally spaced angles in (0, theta_max]; the curve with the smallest sum
    of squared residuals wins.
    """
    if meta.nominal_focal <= 0 or meta.fov <= 0:
        raise InvalidInputError("nominal focal length and fov must be positive")
    theta = np.linspace(0.0, meta.theta_max, samples + 1)[1:]
    design = np.stack([theta, theta**3], axis=1)
    hint = _HINTS[meta.model_hint]
    kinds = [hint] if hint is not None else list(ProjectionType)
    best = None
    for kind in kinds:
        if kind == ProjectionType.PERSPECTIVE and meta.theta_max >= 0.5 * np.pi:
            continue
        target = projection_curve(kind, meta.nominal_focal, theta)
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        resid = float(np.sum((design @ coef - target) ** 2))
        if best is None or resid < best.residual:
            best = InitialFit(float(coef[0]), float(coef[1]), kind, resid)
    if best is None:
        raise InvalidInputError("perspective projection cannot cover a field of view >= 180 deg")
    return best


def default_intrinsics(meta: CameraMeta) -> CameraIntrinsics:
    fit = fit_initial_k(meta)
    return CameraIntrinsics(
        k=[fit.k1, fit.k2, 0.0, 0.0, 0.0],
        mu=1.0 / meta.pixel_size[0],
        mv=1.0 / meta.pixel_size[1],
        u0=meta.width / 2.0,
        v0=meta.height / 2.0,
        theta_max=meta.theta_max,
    )
