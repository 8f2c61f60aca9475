import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import least_squares

from wandcal.camera_model import project_points, unproject_points
from wandcal.epipolar import Pose
from wandcal.errors import InvalidInputError
from wandcal.triangulation import ObservationRay, recover_scale, triangulate, triangulate_points

from conftest import fisheye_intrinsics, reference_pose


def bearing(pose, X):
    Y = pose.apply(X)
    return Y / np.linalg.norm(Y)


def rays_for(X, poses):
    return [ObservationRay(i, bearing(p, X), p) for i, p in enumerate(poses)]


def test_two_view_exact():
    X = np.array([100.0, -50.0, 800.0])
    poses = [Pose.identity(), reference_pose(1)]
    result = triangulate(rays_for(X, poses))
    assert np.linalg.norm(result.point - X) < 1e-6
    assert not result.ill_conditioned


def test_three_views_match_two():
    X = np.array([100.0, -50.0, 800.0])
    poses = [Pose.identity(), reference_pose(1), reference_pose(2)]
    two = triangulate(rays_for(X, poses[:2])).point
    three = triangulate(rays_for(X, poses)).point
    assert np.linalg.norm(two - three) < 1e-8


def test_shared_centre_rejected():
    X = np.array([0.0, 0.0, 1000.0])
    with pytest.raises(InvalidInputError):
        triangulate(rays_for(X, [Pose.identity(), Pose.identity()]))


def test_single_ray_rejected():
    with pytest.raises(InvalidInputError):
        triangulate(rays_for(np.array([0.0, 0.0, 1.0]), [Pose.identity()]))


def test_point_behind_fisheye_plane():
    # theta > 90 deg in the reference camera exercises the row switch
    X = np.array([900.0, 0.0, -60.0])
    poses = [Pose.identity(), Pose([0.1, -0.2, 0.05], [-500.0, 80.0, 30.0])]
    assert np.linalg.norm(triangulate(rays_for(X, poses)).point - X) < 1e-6


pose_strategy = st.tuples(
    st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3),
    st.lists(st.floats(-1000.0, 1000.0), min_size=3, max_size=3),
).map(lambda rt: Pose(rt[0], rt[1]))


@settings(max_examples=60, deadline=None)
@given(pose=pose_strategy, seed=st.integers(0, 10_000))
def test_exact_for_random_poses(pose, seed):
    if np.linalg.norm(pose.t) < 50:
        return
    rng = np.random.default_rng(seed)
    X = rng.uniform(-500, 500, (20, 3)) + [0, 0, 1500]
    m0 = X / np.linalg.norm(X, axis=1, keepdims=True)
    Y = pose.apply(X)
    m1 = Y / np.linalg.norm(Y, axis=1, keepdims=True)
    est = triangulate_points(np.stack([m0, m1]), np.stack([np.eye(3), pose.R]),
                             np.stack([np.zeros(3), pose.t]))
    # skip points nearly on the baseline, where depth is unobservable
    centre = -pose.R.T @ pose.t
    base = centre / np.linalg.norm(centre)
    off = np.linalg.norm(np.cross(X / np.linalg.norm(X, axis=1, keepdims=True), base), axis=1)
    ok = off > 0.05
    assert np.all(np.linalg.norm(est[ok] - X[ok], axis=1) < 1e-9 * np.linalg.norm(X[ok], axis=1))


@settings(max_examples=40, deadline=None)
@given(r=st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3),
       t=st.lists(st.floats(-2000.0, 2000.0), min_size=3, max_size=3))
def test_rigid_equivariance(r, t):
    X = np.array([120.0, -40.0, 900.0])
    poses = [Pose.identity(), reference_pose(1), reference_pose(2)]
    g = Pose(r, t)
    # world -> moved world: camera pose composed with g^-1, point moved by g
    ginv = g.inverse()
    moved = [Pose.from_matrix(p.R @ ginv.R, p.R @ ginv.t + p.t) for p in poses]
    base = triangulate(rays_for(X, poses)).point
    shifted = triangulate(rays_for(g.apply(X), moved)).point
    assert np.linalg.norm(shifted - g.apply(base)) < 1e-8 * max(1.0, np.linalg.norm(shifted))


def test_recover_scale_examples():
    A = np.zeros((4, 3))
    C = np.tile([600.0, 0, 0], (4, 1))
    assert recover_scale(600.0, A, C) == pytest.approx(1.0)
    C2 = np.array([[300.0, 0, 0], [0, 600.0, 0]])
    assert recover_scale(600.0, np.zeros((2, 3)), C2) == pytest.approx(1.5)


def test_recover_scale_on_unit_baseline():
    pose = reference_pose(1)
    unit = Pose(pose.r, pose.t / np.linalg.norm(pose.t))
    rng = np.random.default_rng(4)
    A = rng.uniform([-350, -350, 700], [350, 350, 1000], (50, 3))
    d = rng.normal(size=(50, 3))
    C = A + 600 * d / np.linalg.norm(d, axis=1, keepdims=True)
    rec = []
    for P in (A, C):
        m0 = P / np.linalg.norm(P, axis=1, keepdims=True)
        Y = pose.apply(P)
        m1 = Y / np.linalg.norm(Y, axis=1, keepdims=True)
        rec.append(triangulate_points(np.stack([m0, m1]), np.stack([np.eye(3), unit.R]),
                                      np.stack([np.zeros(3), unit.t])))
    lam = recover_scale(600.0, *rec)
    assert lam == pytest.approx(np.linalg.norm([-700, 100, 200]), rel=1e-3)


@given(s=st.floats(0.01, 100.0))
def test_recover_scale_homogeneous(s):
    rng = np.random.default_rng(0)
    A = rng.normal(size=(5, 3))
    C = A + rng.normal(size=(5, 3))
    assert recover_scale(600.0, s * A, s * C) == pytest.approx(recover_scale(600.0, A, C) / s, rel=1e-12)


def test_recover_scale_zero_length():
    with pytest.raises(InvalidInputError):
        recover_scale(600.0, np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(InvalidInputError):
        recover_scale(600.0, np.zeros((0, 3)), np.zeros((0, 3)))


def test_linear_cost_close_to_nonlinear_optimum():
    """Pixel reprojection cost of the linear point vs a brute-force minimiser, 1 px noise."""
    rng = np.random.default_rng(7)
    intr = fisheye_intrinsics()
    params = intr.to_vector()
    poses = (Pose.identity(), reference_pose(1))

    def residual(X, pixels):
        return np.concatenate([project_points(params, p.apply(X)[None])[0] - uv
                               for p, uv in zip(poses, pixels)])

    lin_costs, opt_costs = [], []
    for _ in range(100):
        X = rng.uniform([-350, -350, 700], [350, 350, 1000])
        pixels = [project_points(params, p.apply(X)[None])[0] + rng.normal(0, 1.0, 2) for p in poses]
        rays = [ObservationRay(i, unproject_points(params, uv[None], intr.theta_max)[0], p)
                for i, (p, uv) in enumerate(zip(poses, pixels))]
        lin = triangulate(rays).point
        best = least_squares(residual, lin, args=(pixels,), xtol=1e-14, ftol=1e-14).x
        lin_costs.append(np.sum(residual(lin, pixels) ** 2))
        opt_costs.append(np.sum(residual(best, pixels) ** 2))
    lin_costs, opt_costs = np.array(lin_costs), np.array(opt_costs)
    assert np.all(lin_costs >= opt_costs - 1e-9)
    ratio = lin_costs.sum() / opt_costs.sum()
    print(f"total cost ratio {ratio:.4f}, per-problem median {np.median(lin_costs / opt_costs):.4f}")
    assert ratio <= 1.10
