import numpy as np
import pytest

from wandcal import synth
from wandcal.epipolar import Pose
from wandcal.errors import DegenerateConfigurationError, InsufficientDataError
from wandcal.pair_calib import (
    PairConfig, _reconstruct, calibrate_pair, frames_within_tolerance, init_extrinsics, optimize_distances,
    reject_outliers, state18,
)
from wandcal.camera_model import default_intrinsics
from wandcal.wand import ObservationTable

from conftest import WAND


def theta_max(rig):
    return (rig.metas[0].theta_max, rig.metas[1].theta_max)


def true_state(rig):
    return state18(rig.intrinsics[0], rig.intrinsics[1], rig.poses[1])


def test_exact_recovery(pair_data, pair_result):
    rig, _, _ = pair_data
    m = synth.compare(rig, pair_result.intrinsics, {0: Pose.identity(), 1: pair_result.pose})
    assert m.rotation_error[1] < 1e-5
    assert m.translation_error[1] < 1e-7
    for c in (0, 1):
        k_true = rig.intrinsics[c].k[0] / rig.intrinsics[c].mu
        k_est = pair_result.intrinsics[c].k[0] / pair_result.intrinsics[c].mu
        assert abs(k_true - k_est) < 1e-6
        assert pair_result.e_rms[c] < 1e-8
    assert pair_result.rejected_frames.size == 0
    assert "gauge_fix_mu" in pair_result.deviations


def test_insufficient_frames(pair_data):
    rig, table, _ = pair_data
    with pytest.raises(InsufficientDataError):
        calibrate_pair(table.select_frames(np.arange(len(table)) < 10), WAND, rig.metas)


def test_init_extrinsics_translation(pair_data):
    rig, table, _ = pair_data
    pose = init_extrinsics(rig.intrinsics[0], rig.intrinsics[1], table, WAND)
    T = np.array([-700.0, 100.0, 200.0])
    assert np.linalg.norm(pose.t - T) / np.linalg.norm(T) < 1e-4


def test_identity_pose_is_degenerate():
    rig = synth.reference_rig(2)
    rig.poses[1] = Pose.identity()
    table, _ = synth.generate(synth.SimScenario(rig, WAND, frames=60, seed=2))
    with pytest.raises(DegenerateConfigurationError):
        init_extrinsics(rig.intrinsics[0], rig.intrinsics[1], table, WAND)


def test_init_extrinsics_with_outlier_frames():
    rig = synth.reference_rig(2)
    table, _ = synth.generate(synth.SimScenario(rig, WAND, frames=300, noise=1.0, seed=4))
    rng = np.random.default_rng(4)
    bad = rng.choice(len(table), 30, replace=False)
    pixels = table.pixels.copy()
    pixels[bad, 1] += rng.uniform(-60, 60, (30, 3, 2))
    table = ObservationTable(table.frame_ids, table.camera_ids, pixels)
    pose = init_extrinsics(rig.intrinsics[0], rig.intrinsics[1], table, WAND)
    true = rig.poses[1]
    assert synth.rotation_error(true.R, pose.R) < 1.0
    assert synth.translation_error(true.t, pose.t) < 0.02


def test_step3_from_truth_stays(pair_data):
    rig, table, _ = pair_data
    x0 = true_state(rig)
    x, rep = optimize_distances(x0, table, WAND, theta_max=theta_max(rig))
    assert rep.final_cost < 1e-18
    # round-off may still be "improved" but the state must not move
    assert np.max(np.abs(x - x0) / np.maximum(1.0, np.abs(x0))) < 1e-9


def test_step3_from_scaled_focal(pair_data):
    rig, table, _ = pair_data
    x0 = true_state(rig)
    x0[[0, 6]] *= 0.9
    x, rep = optimize_distances(x0, table, WAND, theta_max=theta_max(rig))
    assert rep.final_cost < 1e-10
    assert rep.final_cost < rep.initial_cost


def test_step3_numeric_jacobian_agrees(pair_data):
    rig, table, _ = pair_data
    x0 = true_state(rig)
    x0[[0, 6]] *= 0.95
    sub = table.select_frames(np.arange(len(table)) < 60)
    xa, _ = optimize_distances(x0, sub, WAND, theta_max=theta_max(rig))
    xn, _ = optimize_distances(x0, sub, WAND, PairConfig(jacobian="numeric"), theta_max(rig))
    np.testing.assert_allclose(xa, xn, rtol=1e-6, atol=1e-6)


def test_noisy_step3_reduces_cost():
    rig = synth.reference_rig(2)
    table, _ = synth.generate(synth.SimScenario(rig, WAND, frames=300, noise=1.0, seed=5))
    seed = {c: default_intrinsics(rig.metas[c]) for c in (0, 1)}
    pose = init_extrinsics(seed[0], seed[1], table, WAND)
    x, rep = optimize_distances(state18(seed[0], seed[1], pose), table, WAND, theta_max=theta_max(rig))
    assert rep.final_cost < rep.initial_cost
    # per-frame residual magnitude of a few mm^2 at one pixel of noise
    assert rep.final_cost / len(table) < 200


def test_reject_noiseless_keeps_all(pair_data):
    rig, table, _ = pair_data
    kept = reject_outliers(true_state(rig), table, WAND, theta_max=theta_max(rig))
    assert len(kept) == len(table)


def test_reject_corrupted_frame(pair_data):
    rig, table, _ = pair_data
    pixels = table.pixels.copy()
    pixels[7, 0, 0] += 50.0
    bad = ObservationTable(table.frame_ids, table.camera_ids, pixels)
    kept = reject_outliers(true_state(rig), bad, WAND, theta_max=theta_max(rig))
    assert table.frame_ids[7] not in kept.frame_ids
    assert len(kept) == len(table) - 1


def test_threshold_boundary_is_kept():
    P = np.zeros((3, 3, 3))
    P[:, 2, 0] = [600.0 * 0.99, 600.0 * 0.98, 600.0]
    keep = frames_within_tolerance(P, WAND, 0.01)
    assert keep.tolist() == [True, False, True]
    # exactly representable boundary: lengths 601.5 against L=600 with threshold 0.0025
    P[0, 2, 0] = 601.5
    assert frames_within_tolerance(P[:1], WAND, 0.0025)[0]


def test_sigma_one_reprojection_and_monotone_ba():
    rig = synth.reference_rig(2)
    table, _ = synth.generate(synth.SimScenario(rig, WAND, frames=300, noise=1.0, seed=6))
    res = calibrate_pair(table, WAND, rig.metas)
    for c in (0, 1):
        assert 0.6 <= res.e_rms[c] <= 1.2
        assert res.e_rms[c] <= res.reports["e_rms_initial"][c] + 1e-12
    assert res.reports["step3"].final_cost <= res.reports["step3"].initial_cost
    # wand length within 1% on average after calibration
    P = _reconstruct(res.reports["state18"], table.pixels[:, 0], table.pixels[:, 1], theta_max(rig), False)
    assert abs(np.nanmean(np.linalg.norm(P[:, 0] - P[:, 2], axis=1)) - WAND.L) / WAND.L < 0.01


def test_world_motion_does_not_change_result(pair_data, pair_result):
    rig, _, _ = pair_data
    moved = synth.Rig(rig.metas, rig.intrinsics, rig.poses, Pose([0.3, -0.2, 0.5], [100.0, -40.0, 250.0]))
    table2, _ = synth.generate(synth.SimScenario(moved, WAND, frames=300, seed=1))
    res = calibrate_pair(table2, WAND, rig.metas)
    assert synth.rotation_error(res.pose.R, pair_result.pose.R) < 1e-5
    assert synth.translation_error(pair_result.pose.t, res.pose.t) < 1e-7


def test_pixel_pitch_all_mode_runs(pair_data):
    rig, table, _ = pair_data
    res = calibrate_pair(table, WAND, rig.metas, PairConfig(pixel_pitch="all"))
    assert "gauge_fix_mu" not in res.deviations
    assert max(res.e_rms.values()) < 1e-6
