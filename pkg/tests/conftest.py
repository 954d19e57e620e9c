import numpy as np
import pytest

from navgen.dataset import sample_trajectories
from navgen.gridworld import TrajConfig, WorldSpec, build_world


@pytest.fixture(scope="session")
def small_worlds():
    return [build_world(WorldSpec(16, 16, 4, 6, seed=s)) for s in (100, 101, 102)]


@pytest.fixture(scope="session")
def oracle_trajectories(small_worlds):
    """Trajectories whose goal frame is SSIM-distinct from every earlier frame,
    so threshold termination is unambiguous for replay backends."""
    return sample_trajectories(small_worlds, 8, TrajConfig(), seed=900,
                               min_goal_open=4, distinct_goal_tau=0.7)
