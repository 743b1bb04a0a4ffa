import numpy as np
import pytest

from thermoslam.geom import CameraIntrinsics


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def K():
    return CameraIntrinsics(160.0, 160.0, 159.5, 127.5, 320, 256)


def random_twist(rng, max_angle=2.5, max_trans=2.0):
    w = rng.normal(size=3)
    w *= rng.uniform(0.0, max_angle) / np.linalg.norm(w)
    return np.concatenate([w, rng.uniform(-max_trans, max_trans, 3)])
