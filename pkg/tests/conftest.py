import numpy as np
import pytest

from exactcoreset.dataset import SyntheticLoop
from exactcoreset.evalbench import make_pair_problem
from exactcoreset.registration import estimate_covariances


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def pair():
    return make_pair_problem(num_points=3000, seed=0)


@pytest.fixture(scope="session")
def small_loop():
    """Four frames of a synthetic loop with their clouds."""
    loop = SyntheticLoop(num_frames=4, points_per_frame=800, seed=1)
    frames = [loop[index] for index in range(len(loop))]
    clouds = [estimate_covariances(points) for points, _ in frames]
    return loop, clouds
