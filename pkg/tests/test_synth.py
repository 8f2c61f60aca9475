import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wandcal import synth
from wandcal.camera_model import project_points
from wandcal.errors import InfeasibleScenarioError, InvalidInputError
from wandcal.rotation import rodrigues
from wandcal.wand import wand_markers

from conftest import WAND


def test_deterministic_per_seed():
    rig = synth.reference_rig(3)
    a, _ = synth.generate(synth.SimScenario(rig, WAND, frames=40, noise=1.0, seed=9, min_cameras=2))
    b, _ = synth.generate(synth.SimScenario(rig, WAND, frames=40, noise=1.0, seed=9, min_cameras=2))
    c, _ = synth.generate(synth.SimScenario(rig, WAND, frames=40, noise=1.0, seed=10, min_cameras=2))
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert not np.array_equal(np.nan_to_num(a.pixels), np.nan_to_num(c.pixels))


def test_noise_statistics():
    rig = synth.reference_rig(2)
    table, truth = synth.generate(synth.SimScenario(rig, WAND, frames=10_000, noise=1.5, seed=0))
    diff = (table.pixels - truth.clean_pixels).ravel()
    assert diff.size >= 1e5
    assert np.std(diff) == pytest.approx(1.5, rel=0.05)


def test_exact_marker_distances():
    rig = synth.reference_rig(3)
    _, truth = synth.generate(synth.SimScenario(rig, WAND, frames=300, seed=1))
    X = truth.markers
    np.testing.assert_allclose(np.linalg.norm(X[:, 0] - X[:, 1], axis=1), 400.0, rtol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(X[:, 1] - X[:, 2], axis=1), 200.0, rtol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(X[:, 0] - X[:, 2], axis=1), 600.0, rtol=1e-12)


def test_reference_rig_values():
    rig = synth.reference_rig(3)
    for c in rig.camera_ids:
        meta = rig.metas[c]
        assert (meta.width, meta.height) == (640, 480)
        assert meta.pixel_size == (0.0056, 0.0056)
        assert np.rad2deg(meta.fov) == pytest.approx(185.0)
    assert np.allclose(rig.poses[1].t, [-700, 100, 200])
    assert np.allclose(rig.poses[2].t, [-1200, -200, 700])


def test_noiseless_pixels_reproject_exactly():
    rig = synth.reference_rig(2)
    table, truth = synth.generate(synth.SimScenario(rig, WAND, frames=50, seed=3))
    for ci, c in enumerate(table.camera_ids):
        e = synth.rms_reprojection(rig.intrinsics[c], rig.poses[c], truth.markers, table.pixels[:, ci])
        assert e < 1e-8


def test_truth_poses_match_markers():
    _, truth = synth.generate(synth.SimScenario(synth.reference_rig(2), WAND, frames=30, seed=2))
    np.testing.assert_allclose(wand_markers(truth.wand_poses, WAND), truth.markers, atol=1e-9)


def test_infeasible_scenario():
    far = ((5000.0, 5000.0, -9000.0), (5100.0, 5100.0, -8900.0))
    with pytest.raises(InfeasibleScenarioError):
        synth.generate(synth.SimScenario(synth.room_rig(3, "conventional"), WAND, far, frames=10))


def test_scenario_validation():
    rig = synth.reference_rig(2)
    with pytest.raises(InvalidInputError):
        synth.SimScenario(rig, WAND, ((0, 0, 0), (0, 1, 1)))
    with pytest.raises(InvalidInputError):
        synth.SimScenario(rig, WAND, frames=0)


def test_room_rig_sees_its_volume():
    rig = synth.room_rig(4, "conventional", 3500, 2500)
    vol = ((-1500, -1500, -1500), (1500, 1500, 1500))
    table, _ = synth.generate(synth.SimScenario(rig, WAND, vol, frames=100, seed=0, min_cameras=2))
    assert np.all(np.count_nonzero(table.full_view, axis=1) >= 2)
    assert np.array_equal(rig.poses[0].t, np.zeros(3))


# -- metrics -----------------------------------------------------------------------------------

def rot_z(deg):
    return rodrigues([0, 0, np.deg2rad(deg)])


def test_rotation_error_examples():
    R = rodrigues([0.3, -0.1, 0.7])
    assert synth.rotation_error(R, R) == 0.0
    assert synth.rotation_error(np.eye(3), rot_z(1.0)) == pytest.approx(1.0, abs=1e-9)
    assert synth.rotation_error(np.eye(3), rot_z(180.0)) == pytest.approx(180.0)


@settings(max_examples=50)
@given(a=st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       b=st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       g=st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_rotation_error_symmetric_and_left_invariant(a, b, g):
    Ra, Rb, G = rodrigues(a), rodrigues(b), rodrigues(g)
    e = synth.rotation_error(Ra, Rb)
    assert e == pytest.approx(synth.rotation_error(Rb, Ra), abs=1e-6)
    assert e == pytest.approx(synth.rotation_error(G @ Ra, G @ Rb), abs=1e-5)


def test_translation_error_examples():
    T = np.array([-700.0, 100.0, 200.0])
    assert synth.translation_error(T, T) == 0.0
    e = synth.translation_error(T, [-707.0, 101.0, 202.0])
    assert e == pytest.approx(np.linalg.norm([7, 1, 2]) / np.linalg.norm(T), rel=1e-12)
    assert e == pytest.approx(0.01, abs=5e-5)
    assert synth.translation_error([1, 0, 0], [2, 0, 0]) == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        synth.translation_error([0, 0, 0], [1, 0, 0])


def test_rms_reprojection_offset():
    rig = synth.reference_rig(2)
    intr, pose = rig.intrinsics[0], rig.poses[0]
    X = np.array([[10.0, 20.0, 800.0]])
    uv = project_points(intr.to_vector(), pose.apply(X))
    assert synth.rms_reprojection(intr, pose, X, uv) == pytest.approx(0.0, abs=1e-12)
    assert synth.rms_reprojection(intr, pose, X, uv + [3.0, 4.0]) == pytest.approx(5.0)


def test_d_rms_examples():
    A = np.zeros((4, 3))
    C = np.zeros((4, 3))
    C[:, 0] = 600.0
    assert synth.d_rms(WAND, A, C) == 0.0
    C[:, 0] = 594.0
    assert synth.d_rms(WAND, A, C) == pytest.approx(6.0)
    C[:, 0] = [595.0, 605.0, 595.0, 605.0]
    assert synth.d_rms(WAND, A, C) == pytest.approx(5.0)


def test_metrics_zero_at_truth():
    rig = synth.reference_rig(3)
    m = synth.compare(rig, rig.intrinsics, rig.poses, {c: 0.0 for c in rig.camera_ids}, 0.0)
    assert all(v == 0 for v in m.translation_error.values())
    assert all(v == 0 for v in m.rotation_error.values())
    assert all(all(x == 0 for x in e.values()) for e in m.intrinsic_errors.values())


# -- sweeps --------------------------------------------------------------------------------------

def test_sweep_grids():
    assert len(synth.SWEEPS["noise"]) == 10 and synth.SWEEPS["noise"][[0, -1]].tolist() == [0.0, 2.0]
    sc = synth.sweep_scenario("principal", 270.0, 2, seed=0)
    assert (sc.rig.intrinsics[0].u0, sc.rig.intrinsics[0].v0) == (270.0, 190.0)
    sc = synth.sweep_scenario("focal", 1.5, 3, seed=0)
    assert sc.rig.metas[1].nominal_focal == 2.0
    assert sc.rig.intrinsics[1].k[0] == pytest.approx(1.5)
    with pytest.raises(InvalidInputError):
        synth.sweep_scenario("gamma", 1.0, 2, 0)


def test_cell_seeds_distinct_and_stable():
    seeds = {synth.cell_seed(0, "noise", i, n, r) for i in range(10) for n in (2, 3) for r in range(10)}
    assert len(seeds) == 200
    assert synth.cell_seed(0, "noise", 1, 2, 3) == synth.cell_seed(0, "noise", 1, 2, 3)


def test_failed_runs_are_recorded_not_fatal():
    rows = [{"sweep": "noise", "value": 1.0, "cameras": 2, "repeat": 0, "seed": 1, "camera": -1,
             "error": "EstimationFailedError: boom"}]
    agg = synth.aggregate_sweep(rows)
    assert agg[0]["failures"] == 1 and agg[0]["runs"] == 0
