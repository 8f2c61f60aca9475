import numpy as np
import pytest

from wandcal import synth
from wandcal.camera_model import CameraIntrinsics
from wandcal.epipolar import Pose
from wandcal.rotation import euler_to_matrix
from wandcal.wand import WandGeometry

WAND = WandGeometry(400.0, 200.0, 600.0)
PITCH = 0.0056


def fisheye_intrinsics(k=(2.0, 0, 0, 0, 0), u0=310.0, v0=250.0):
    return CameraIntrinsics(list(k), 1 / PITCH, 1 / PITCH, u0, v0, theta_max=np.deg2rad(92.5))


def reference_pose(cam=1):
    return Pose.from_matrix(euler_to_matrix(synth.REFERENCE_EULER[cam]), synth.REFERENCE_T[cam])


def random_bearings(rng, n, max_theta=np.deg2rad(80)):
    theta = rng.uniform(0, max_theta, n)
    phi = rng.uniform(0, 2 * np.pi, n)
    return np.column_stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])


@pytest.fixture(scope="session")
def wand():
    return WAND


@pytest.fixture(scope="session")
def pair_data():
    rig = synth.reference_rig(2)
    table, truth = synth.generate(synth.SimScenario(rig, WAND, frames=300, noise=0.0, seed=1))
    return rig, table, truth


@pytest.fixture(scope="session")
def pair_result(pair_data):
    from wandcal.pair_calib import calibrate_pair
    rig, table, _ = pair_data
    return calibrate_pair(table, WAND, rig.metas)


@pytest.fixture(scope="session")
def triple_data():
    rig = synth.reference_rig(3)
    table, truth = synth.generate(synth.SimScenario(rig, WAND, frames=300, noise=0.0, seed=1, min_cameras=2))
    return rig, table, truth


@pytest.fixture(scope="session")
def triple_result(triple_data):
    from wandcal.multi_calib import calibrate
    rig, table, _ = triple_data
    return calibrate(table, WAND, rig.metas)
